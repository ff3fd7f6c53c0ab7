#include "hlgfa/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace hlgfa {
namespace {

constexpr char kMagic[4] = {'H', 'L', 'G', 'W'};
constexpr const char* kMetadataKey = "__metadata__";

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    auto bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t at) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes[at + i]) << (8 * i);
    return std::bit_cast<T>(bits);
}

std::size_t element_bytes(DType dtype) { return dtype == DType::f32 ? 4 : 8; }
const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "F32" : "F64"; }

DType parse_dtype(const std::string& name) {
    if (name == "F32") return DType::f32;
    if (name == "F64") return DType::f64;
    throw std::runtime_error("archive: unsupported dtype '" + name + "'");
}

}  // namespace

void WeightsArchive::put(const std::string& name, Tensor tensor, DType dtype) {
    if (name == kMetadataKey) throw std::invalid_argument("archive: reserved tensor name");
    if (!entries_.contains(name)) order_.push_back(name);
    entries_[name] = Entry{std::move(tensor), dtype};
}

bool WeightsArchive::contains(const std::string& name) const { return entries_.contains(name); }

const Tensor& WeightsArchive::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("archive: missing tensor '" + name + "'");
    return it->second.tensor;
}

DType WeightsArchive::dtype(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("archive: missing tensor '" + name + "'");
    return it->second.dtype;
}

std::size_t WeightsArchive::total_elements() const {
    std::size_t total = 0;
    for (const auto& [name, entry] : entries_) total += entry.tensor.size();
    return total;
}

std::vector<std::uint8_t> WeightsArchive::serialize() const {
    nlohmann::ordered_json index = nlohmann::ordered_json::object();
    std::vector<std::uint8_t> payload;
    for (const auto& name : order_) {
        const Entry& entry = entries_.at(name);
        const std::size_t offset = payload.size();
        for (double v : entry.tensor.values()) {
            if (entry.dtype == DType::f32) {
                put_le(payload, static_cast<float>(v));
            } else {
                put_le(payload, v);
            }
        }
        index[name] = {{"dtype", dtype_name(entry.dtype)},
                       {"shape", entry.tensor.shape()},
                       {"offset", offset},
                       {"length", payload.size() - offset}};
    }
    if (!metadata_.empty()) index[kMetadataKey] = metadata_;

    const std::string index_text = index.dump();
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_le(out, kVersion);
    put_le(out, static_cast<std::uint64_t>(index_text.size()));
    out.insert(out.end(), index_text.begin(), index_text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

WeightsArchive WeightsArchive::deserialize(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kHeader = 16;
    if (bytes.size() < kHeader) throw std::runtime_error("archive: truncated header");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw std::runtime_error("archive: bad magic (expected \"HLGW\")");
    }
    const auto version = get_le<std::uint32_t>(bytes, 4);
    if (version != kVersion) {
        throw std::runtime_error("archive: unsupported version " + std::to_string(version));
    }
    const auto index_len = get_le<std::uint64_t>(bytes, 8);
    if (index_len > bytes.size() - kHeader) throw std::runtime_error("archive: truncated index");

    nlohmann::ordered_json index;
    try {
        index = nlohmann::ordered_json::parse(bytes.begin() + kHeader,
                                              bytes.begin() + kHeader + static_cast<std::ptrdiff_t>(index_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("archive: corrupt index: ") + e.what());
    }
    if (!index.is_object()) throw std::runtime_error("archive: index is not a JSON object");

    const auto payload = bytes.subspan(kHeader + index_len);
    WeightsArchive archive;
    for (const auto& [name, record] : index.items()) {
        if (name == kMetadataKey) {
            archive.metadata_ = record.get<std::map<std::string, std::string>>();
            continue;
        }
        try {
            const DType dtype = parse_dtype(record.at("dtype").get<std::string>());
            const Shape shape = record.at("shape").get<Shape>();
            const auto offset = record.at("offset").get<std::uint64_t>();
            const auto length = record.at("length").get<std::uint64_t>();
            const std::size_t count = shape_numel(shape);
            if (length != count * element_bytes(dtype)) {
                throw std::runtime_error("archive: tensor '" + name + "' length " +
                                         std::to_string(length) + " does not match shape " +
                                         shape_string(shape));
            }
            if (offset > payload.size() || length > payload.size() - offset) {
                throw std::runtime_error("archive: truncated payload for tensor '" + name + "'");
            }
            std::vector<double> values(count);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t at = offset + i * element_bytes(dtype);
                values[i] = dtype == DType::f32 ? static_cast<double>(get_le<float>(payload, at))
                                                : get_le<double>(payload, at);
            }
            archive.put(name, Tensor(shape, std::move(values)), dtype);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("archive: malformed record for '" + name + "': " + e.what());
        }
    }
    return archive;
}

void WeightsArchive::save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("archive: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("archive: write failed for " + path.string());
}

WeightsArchive WeightsArchive::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("archive: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
    std::uint64_t hash = seed;
    for (std::uint8_t b : bytes) {
        hash ^= b;
        hash *= 0x100000001B3ULL;
    }
    return hash;
}

std::string hex64(std::uint64_t value) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << value;
    return out.str();
}

}  // namespace hlgfa
