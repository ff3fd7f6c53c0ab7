#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hlgfa/tensor.hpp"

namespace hlgfa {

enum class DType { f32, f64 };

/// Named-tensor container persisted in the HLGW format:
///
///   bytes 0..3    magic "HLGW"
///   bytes 4..7    format version, u32 little-endian (currently 1)
///   bytes 8..15   index length in bytes, u64 little-endian
///   index         UTF-8 JSON object: name -> {"dtype": "F32"|"F64",
///                 "shape": [...], "offset": n, "length": n}; offsets are
///                 relative to the start of the payload. The reserved key
///                 "__metadata__" holds a string -> string map.
///   payload       raw little-endian tensors, in index order
///
/// Entries keep insertion order, which is also payload order.
class WeightsArchive {
public:
    static constexpr std::uint32_t kVersion = 1;

    void put(const std::string& name, Tensor tensor, DType dtype = DType::f32);
    bool contains(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    DType dtype(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }
    std::size_t total_elements() const;

    std::map<std::string, std::string>& metadata() { return metadata_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    std::vector<std::uint8_t> serialize() const;
    static WeightsArchive deserialize(std::span<const std::uint8_t> bytes);

    void save(const std::filesystem::path& path) const;
    static WeightsArchive load(const std::filesystem::path& path);

private:
    struct Entry {
        Tensor tensor;
        DType dtype;
    };
    std::vector<std::string> order_;
    std::map<std::string, Entry> entries_;
    std::map<std::string, std::string> metadata_;
};

/// FNV-1a 64 over a byte range; used for weight/config fingerprints.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xCBF29CE484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace hlgfa
