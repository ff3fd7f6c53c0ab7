#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hlgfa/image.hpp"
#include "hlgfa/tensor.hpp"

namespace hlgfa {

enum class Label { normal, anomalous };

struct TestItem {
    std::filesystem::path image_path;
    std::string defect_type;  // "good" or the defect name
    std::optional<std::filesystem::path> mask_path;
    Label label = Label::normal;
};

struct CategoryIndex {
    std::string name;
    std::vector<std::filesystem::path> train_normal;
    std::vector<TestItem> test_items;

    std::size_t anomalous_count() const;
};

struct DatasetIndex {
    std::filesystem::path root;
    std::vector<CategoryIndex> categories;

    const CategoryIndex& category(const std::string& name) const;
    /// e.g. "bottle: 209 train, 83 test (63 anomalous)", one line per category.
    std::string summary() const;
};

/// Scans root/<category>/{train/good, test/<type>, ground_truth/<type>/<stem>_mask.png}
/// in lexicographic order. An empty filter keeps every category directory.
/// Errors: a requested category is missing, train/good is missing or empty,
/// an anomalous test image has no mask, or a file is not a PNG.
DatasetIndex scan_dataset(const std::filesystem::path& root, const std::vector<std::string>& category_filter = {});

/// JSON manifest for other layouts:
///   {"items": [{"category": "c", "split": "train" | "test",
///               "image": "a.png", "label": "good" | "<defect>",
///               "mask": "a_mask.png"}]}
/// Relative paths resolve against the manifest's directory.
DatasetIndex load_manifest(const std::filesystem::path& manifest, const std::vector<std::string>& category_filter = {});

/// Decodes to RGB in [0, 1] and resizes to target_size x target_size with
/// antialiased bilinear filtering (skipped when already that size;
/// target_size 0 keeps the native size).
ImageTensor load_sample(const std::filesystem::path& path, std::size_t target_size = 640);

/// Nearest-neighbour resize to target_size x target_size, then gray > 127
/// becomes 1. Returns (1, H, W).
Tensor load_mask(const std::filesystem::path& path, std::size_t target_size = 640);

/// Fisher-Yates permutation of 0..n-1 seeded by derive_seed(seed, epoch).
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

struct TrainSample {
    std::string category;
    std::filesystem::path path;
};

/// Normal training images of the listed categories (all when empty), in
/// index order. Test items never appear here.
std::vector<TrainSample> training_samples(const DatasetIndex& index, const std::vector<std::string>& categories = {});

}  // namespace hlgfa
