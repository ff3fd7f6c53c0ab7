#include "hlgfa/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "hlgfa/png_io.hpp"
#include "hlgfa/rng.hpp"

namespace fs = std::filesystem;

namespace hlgfa {
namespace {

bool is_png_name(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png";
}

void require_png(const fs::path& p) {
    static constexpr std::array<unsigned char, 8> kSignature{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    std::ifstream in(p, std::ios::binary);
    std::array<char, 8> head{};
    if (!in.read(head.data(), head.size()) ||
        !std::equal(head.begin(), head.end(), kSignature.begin(),
                    [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; })) {
        throw std::runtime_error("dataset: unreadable image " + p.string());
    }
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (directories ? entry.is_directory() : (entry.is_regular_file() && is_png_name(entry.path()))) {
            out.push_back(entry.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

CategoryIndex scan_category(const fs::path& dir) {
    CategoryIndex cat;
    cat.name = dir.filename().string();
    const fs::path train_good = dir / "train" / "good";
    if (!fs::is_directory(train_good)) {
        throw std::runtime_error("dataset: category '" + cat.name + "' has no train/good directory");
    }
    cat.train_normal = sorted_entries(train_good, false);
    if (cat.train_normal.empty()) {
        throw std::runtime_error("dataset: category '" + cat.name + "' has no training images in train/good");
    }
    for (const fs::path& p : cat.train_normal) require_png(p);
    for (const fs::path& type_dir : sorted_entries(dir / "test", true)) {
        const std::string type = type_dir.filename().string();
        for (const fs::path& image : sorted_entries(type_dir, false)) {
            require_png(image);
            TestItem item{image, type, std::nullopt, type == "good" ? Label::normal : Label::anomalous};
            if (item.label == Label::anomalous) {
                const fs::path mask = dir / "ground_truth" / type / (image.stem().string() + "_mask.png");
                if (!fs::is_regular_file(mask)) {
                    throw std::runtime_error("dataset: anomalous test image " + image.string() + " has no mask " +
                                             mask.string());
                }
                require_png(mask);
                item.mask_path = mask;
            }
            cat.test_items.push_back(std::move(item));
        }
    }
    return cat;
}

void check_purity(const CategoryIndex& cat) {
    std::set<fs::path> train(cat.train_normal.begin(), cat.train_normal.end());
    for (const TestItem& item : cat.test_items) {
        if (train.count(item.image_path)) {
            throw std::runtime_error("dataset: " + item.image_path.string() + " is listed in both train and test");
        }
    }
}

}  // namespace

std::size_t CategoryIndex::anomalous_count() const {
    return static_cast<std::size_t>(std::count_if(test_items.begin(), test_items.end(),
                                                  [](const TestItem& t) { return t.label == Label::anomalous; }));
}

const CategoryIndex& DatasetIndex::category(const std::string& name) const {
    for (const CategoryIndex& c : categories) {
        if (c.name == name) return c;
    }
    throw std::out_of_range("dataset: no category '" + name + "'");
}

std::string DatasetIndex::summary() const {
    std::ostringstream out;
    for (const CategoryIndex& c : categories) {
        out << c.name << ": " << c.train_normal.size() << " train, " << c.test_items.size() << " test ("
            << c.anomalous_count() << " anomalous)\n";
    }
    return out.str();
}

DatasetIndex scan_dataset(const fs::path& root, const std::vector<std::string>& category_filter) {
    if (!fs::is_directory(root)) throw std::runtime_error("dataset: root " + root.string() + " is not a directory");
    DatasetIndex index;
    index.root = root;
    if (category_filter.empty()) {
        for (const fs::path& dir : sorted_entries(root, true)) index.categories.push_back(scan_category(dir));
    } else {
        std::vector<std::string> names = category_filter;
        std::sort(names.begin(), names.end());
        names.erase(std::unique(names.begin(), names.end()), names.end());
        for (const std::string& name : names) {
            if (!fs::is_directory(root / name)) {
                throw std::runtime_error("dataset: category '" + name + "' not found under " + root.string());
            }
            index.categories.push_back(scan_category(root / name));
        }
    }
    if (index.categories.empty()) throw std::runtime_error("dataset: no categories under " + root.string());
    for (const CategoryIndex& c : index.categories) check_purity(c);
    return index;
}

DatasetIndex load_manifest(const fs::path& manifest, const std::vector<std::string>& category_filter) {
    std::ifstream in(manifest);
    if (!in) throw std::runtime_error("dataset: cannot open manifest " + manifest.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("dataset: malformed manifest " + manifest.string() + ": " + e.what());
    }
    const fs::path base = manifest.parent_path();
    const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
    std::map<std::string, CategoryIndex> by_name;
    const std::set<std::string> keep(category_filter.begin(), category_filter.end());
    for (const auto& item : doc.at("items")) {
        const std::string category = item.at("category").get<std::string>();
        if (!keep.empty() && !keep.count(category)) continue;
        CategoryIndex& cat = by_name[category];
        cat.name = category;
        const fs::path image = resolve(item.at("image").get<std::string>());
        require_png(image);
        const std::string split = item.at("split").get<std::string>();
        const std::string label = item.value("label", std::string("good"));
        if (split == "train") {
            if (label != "good") throw std::runtime_error("dataset: manifest lists an anomalous training image " +
                                                          image.string());
            cat.train_normal.push_back(image);
        } else if (split == "test") {
            TestItem t{image, label, std::nullopt, label == "good" ? Label::normal : Label::anomalous};
            if (item.contains("mask") && !item.at("mask").is_null()) t.mask_path = resolve(item.at("mask"));
            if (t.label == Label::anomalous && !t.mask_path) {
                throw std::runtime_error("dataset: anomalous test image " + image.string() + " has no mask");
            }
            if (t.mask_path) require_png(*t.mask_path);
            cat.test_items.push_back(std::move(t));
        } else {
            throw std::runtime_error("dataset: manifest split must be 'train' or 'test', got '" + split + "'");
        }
    }
    DatasetIndex index;
    index.root = base;
    for (auto& [name, cat] : by_name) {
        if (cat.train_normal.empty()) {
            throw std::runtime_error("dataset: category '" + name + "' has no training images");
        }
        check_purity(cat);
        index.categories.push_back(std::move(cat));
    }
    for (const std::string& name : keep) {
        if (!by_name.count(name)) throw std::runtime_error("dataset: category '" + name + "' not in manifest");
    }
    if (index.categories.empty()) throw std::runtime_error("dataset: manifest has no categories");
    return index;
}

ImageTensor load_sample(const fs::path& path, std::size_t target_size) {
    const png::Image8 img = png::read_rgb8(path);
    if (img.width == 0 || img.height == 0) throw std::runtime_error("load_sample: zero-size image " + path.string());
    Tensor t = Tensor::chw(3, img.height, img.width);
    const std::size_t plane = img.height * img.width;
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < 3; ++c) t[c * plane + p] = img.pixels[p * 3 + c] / 255.0;
    }
    if (target_size != 0) t = resize_antialiased(t, target_size, target_size);
    return ImageTensor{std::move(t), path.string(), Resolution::high};
}

Tensor load_mask(const fs::path& path, std::size_t target_size) {
    const png::Image8 img = png::read_gray8(path);
    Tensor t = Tensor::chw(1, img.height, img.width);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = img.pixels[i] > 127 ? 1.0 : 0.0;
    if (target_size != 0) t = resize_nearest(t, target_size, target_size);
    return t;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Xorshift64Star rng(derive_seed(seed, epoch));
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

std::vector<TrainSample> training_samples(const DatasetIndex& index, const std::vector<std::string>& categories) {
    std::vector<TrainSample> out;
    for (const CategoryIndex& cat : index.categories) {
        if (!categories.empty() && std::find(categories.begin(), categories.end(), cat.name) == categories.end()) {
            continue;
        }
        for (const fs::path& p : cat.train_normal) out.push_back(TrainSample{cat.name, p});
    }
    return out;
}

}  // namespace hlgfa
