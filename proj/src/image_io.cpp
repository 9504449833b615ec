#include "dtu/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace dtu {

Tensor<float> read_image_rgb01(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);  // BGR
    if (img.empty()) throw DataError("cannot decode image: " + path);
    const int64_t h = img.rows, w = img.cols;
    Tensor<float> out({3, h, w});
    for (int64_t y = 0; y < h; ++y) {
        const cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
        for (int64_t x = 0; x < w; ++x) {
            out[0 * h * w + y * w + x] = static_cast<float>(row[x][2]) / 255.0f;  // R
            out[1 * h * w + y * w + x] = static_cast<float>(row[x][1]) / 255.0f;  // G
            out[2 * h * w + y * w + x] = static_cast<float>(row[x][0]) / 255.0f;  // B
        }
    }
    return out;
}

Tensor<uint8_t> read_image_rgb8(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    if (img.empty()) throw DataError("cannot decode image: " + path);
    const int64_t h = img.rows, w = img.cols;
    Tensor<uint8_t> out({h, w, 3});
    for (int64_t y = 0; y < h; ++y) {
        const cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
        for (int64_t x = 0; x < w; ++x) {
            out[(y * w + x) * 3 + 0] = row[x][2];
            out[(y * w + x) * 3 + 1] = row[x][1];
            out[(y * w + x) * 3 + 2] = row[x][0];
        }
    }
    return out;
}

static uint8_t to_u8(float v) {
    const float s = v * 255.0f + 0.5f;
    if (s <= 0.0f) return 0;
    if (s >= 255.0f) return 255;
    return static_cast<uint8_t>(s);
}

void write_image_png(const std::string& path, const Tensor<float>& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
        throw DataError("write_image_png: expected (1|3,h,w), got " + shape_str(image.shape()));
    }
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
    for (int64_t y = 0; y < h; ++y) {
        cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
        for (int64_t x = 0; x < w; ++x) {
            const float r = image[0 * h * w + y * w + x];
            const float g = c == 3 ? image[1 * h * w + y * w + x] : r;
            const float b = c == 3 ? image[2 * h * w + y * w + x] : r;
            row[x] = cv::Vec3b(to_u8(b), to_u8(g), to_u8(r));
        }
    }
    if (!cv::imwrite(path, img)) throw DataError("cannot write image: " + path);
}

void write_mask_png(const std::string& path, const Tensor<int32_t>& mask) {
    if (mask.rank() != 2) {
        throw DataError("write_mask_png: expected (h,w), got " + shape_str(mask.shape()));
    }
    const int64_t h = mask.dim(0), w = mask.dim(1);
    cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
    for (int64_t y = 0; y < h; ++y) {
        uint8_t* row = img.ptr<uint8_t>(static_cast<int>(y));
        for (int64_t x = 0; x < w; ++x) {
            const int32_t v = mask[y * w + x];
            row[x] = static_cast<uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
        }
    }
    if (!cv::imwrite(path, img)) throw DataError("cannot write mask: " + path);
}

std::array<uint8_t, 3> class_color(int32_t cls) {
    static const std::array<std::array<uint8_t, 3>, 10> table{{{0, 0, 0},
                                                               {230, 55, 40},
                                                               {60, 180, 75},
                                                               {0, 130, 200},
                                                               {245, 200, 30},
                                                               {145, 70, 190},
                                                               {70, 220, 210},
                                                               {240, 130, 40},
                                                               {210, 90, 160},
                                                               {150, 200, 90}}};
    if (cls <= 0) return table[0];
    return table[static_cast<size_t>(1 + (cls - 1) % 9)];
}

void write_overlay_png(const std::string& path, const Tensor<float>& image,
                       const Tensor<int32_t>& mask) {
    if (image.rank() != 3 || mask.rank() != 2 || image.dim(1) != mask.dim(0) ||
        image.dim(2) != mask.dim(1)) {
        throw DataError("write_overlay_png: image " + shape_str(image.shape()) +
                        " does not match mask " + shape_str(mask.shape()));
    }
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
    const float alpha = 0.45f;
    for (int64_t y = 0; y < h; ++y) {
        cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
        for (int64_t x = 0; x < w; ++x) {
            float r = image[0 * h * w + y * w + x];
            float g = c == 3 ? image[1 * h * w + y * w + x] : r;
            float b = c == 3 ? image[2 * h * w + y * w + x] : r;
            const int32_t cls = mask[y * w + x];
            if (cls > 0) {
                const auto col = class_color(cls);
                r = (1.0f - alpha) * r + alpha * static_cast<float>(col[0]) / 255.0f;
                g = (1.0f - alpha) * g + alpha * static_cast<float>(col[1]) / 255.0f;
                b = (1.0f - alpha) * b + alpha * static_cast<float>(col[2]) / 255.0f;
            }
            row[x] = cv::Vec3b(to_u8(b), to_u8(g), to_u8(r));
        }
    }
    if (!cv::imwrite(path, img)) throw DataError("cannot write overlay: " + path);
}

}  // namespace dtu
