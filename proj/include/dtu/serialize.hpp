#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dtu/tensor.hpp"

namespace dtu {

// Flat binary tensor serialization: a plain-text manifest (name, dtype,
// shape, byte offset per tensor) followed by one little-endian IEEE blob.
//
//   DTU-TENSORS v1
//   dtype f32
//   count 3
//   tensor <name> <rank> <dims...> <offset> <nbytes>
//   ...
//   blob <total_bytes>
//   <raw data>

template <typename T>
const char* dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}

template <typename T>
void save_tensors(std::ostream& os,
                  const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
    os << "DTU-TENSORS v1\n";
    os << "dtype " << dtype_name<T>() << "\n";
    os << "count " << tensors.size() << "\n";
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t nbytes = static_cast<uint64_t>(t->numel()) * sizeof(T);
        os << "tensor " << name << " " << t->rank();
        for (int i = 0; i < t->rank(); ++i) os << " " << t->dim(i);
        os << " " << offset << " " << nbytes << "\n";
        offset += nbytes;
    }
    os << "blob " << offset << "\n";
    for (const auto& [name, t] : tensors) {
        os.write(reinterpret_cast<const char*>(t->data()),
                 static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(T))));
    }
    if (!os) throw DataError("save_tensors: write failed");
}

template <typename T>
std::map<std::string, Tensor<T>> load_tensors(std::istream& is) {
    std::string line;
    auto next_line = [&](const char* what) {
        if (!std::getline(is, line)) throw CheckpointError(std::string("truncated header: ") + what);
        return line;
    };
    if (next_line("magic") != "DTU-TENSORS v1") {
        throw CheckpointError("bad tensor store magic: " + line);
    }
    std::istringstream dl(next_line("dtype"));
    std::string tok, dtype;
    dl >> tok >> dtype;
    if (tok != "dtype") throw CheckpointError("malformed dtype line: " + line);
    if (dtype != dtype_name<T>()) {
        throw CheckpointError("dtype mismatch: file has " + dtype + ", expected " +
                              dtype_name<T>());
    }
    std::istringstream cl(next_line("count"));
    size_t count = 0;
    cl >> tok >> count;
    if (tok != "count") throw CheckpointError("malformed count line: " + line);

    struct Entry {
        std::string name;
        Shape shape;
        uint64_t offset, nbytes;
    };
    std::vector<Entry> entries;
    for (size_t i = 0; i < count; ++i) {
        std::istringstream tl(next_line("tensor"));
        Entry e;
        int rank = 0;
        tl >> tok >> e.name >> rank;
        if (tok != "tensor" || rank < 0) throw CheckpointError("malformed tensor line: " + line);
        e.shape.resize(static_cast<size_t>(rank));
        for (auto& d : e.shape) tl >> d;
        tl >> e.offset >> e.nbytes;
        if (!tl) throw CheckpointError("malformed tensor line: " + line);
        entries.push_back(std::move(e));
    }
    std::istringstream bl(next_line("blob"));
    uint64_t total = 0;
    bl >> tok >> total;
    if (tok != "blob") throw CheckpointError("malformed blob line: " + line);

    std::vector<char> blob(total);
    is.read(blob.data(), static_cast<std::streamsize>(total));
    if (static_cast<uint64_t>(is.gcount()) != total) {
        throw CheckpointError("truncated tensor blob: expected " + std::to_string(total) +
                              " bytes");
    }
    std::map<std::string, Tensor<T>> out;
    for (const auto& e : entries) {
        Tensor<T> t(e.shape);
        const uint64_t expect = static_cast<uint64_t>(t.numel()) * sizeof(T);
        if (expect != e.nbytes || e.offset + e.nbytes > total) {
            throw CheckpointError("blob bounds disagree for tensor " + e.name);
        }
        std::memcpy(t.data(), blob.data() + e.offset, e.nbytes);
        out.emplace(e.name, std::move(t));
    }
    return out;
}

}  // namespace dtu
