#include <doctest.h>

#include <fstream>
#include <set>
#include <stdexcept>

#include "hlgfa/data.hpp"
#include "hlgfa/png_io.hpp"
#include "oracles.hpp"
#include "scratch.hpp"
#include "synthetic.hpp"

using namespace hlgfa;
using namespace hlgfa::testing;
namespace fs = std::filesystem;

namespace {

void gray_png(const fs::path& path, std::size_t w, std::size_t h, std::uint8_t v) {
    fs::create_directories(path.parent_path());
    png::write_gray8(path, w, h, std::vector<std::uint8_t>(w * h, v));
}

// 3 train, 2 good test, 2 defect test.
void small_tree(const fs::path& root) {
    const fs::path c = root / "widget";
    for (int i = 0; i < 3; ++i) gray_png(c / "train" / "good" / ("t" + std::to_string(i) + ".png"), 32, 32, 100);
    for (int i = 0; i < 2; ++i) gray_png(c / "test" / "good" / ("g" + std::to_string(i) + ".png"), 32, 32, 100);
    for (int i = 0; i < 2; ++i) {
        gray_png(c / "test" / "scratch" / ("d" + std::to_string(i) + ".png"), 32, 32, 30);
        gray_png(c / "ground_truth" / "scratch" / ("d" + std::to_string(i) + "_mask.png"), 32, 32, 255);
    }
}

}  // namespace

TEST_CASE("scan_dataset enumerates a well-formed tree") {
    ScratchDir dir("scan");
    small_tree(dir.path());
    const DatasetIndex index = scan_dataset(dir.path());
    REQUIRE(index.categories.size() == 1);
    const CategoryIndex& c = index.category("widget");
    CHECK(c.train_normal.size() == 3);
    CHECK(c.test_items.size() == 4);
    CHECK(c.anomalous_count() == 2);
    CHECK(c.train_normal[0].filename() == "t0.png");
    for (const TestItem& item : c.test_items) {
        CHECK((item.label == Label::anomalous) == (item.defect_type != "good"));
        CHECK(item.mask_path.has_value() == (item.label == Label::anomalous));
    }
    CHECK(index.summary().find("widget: 3 train, 4 test (2 anomalous)") != std::string::npos);
    CHECK_THROWS_AS((void)index.category("nope"), std::out_of_range);
    CHECK_THROWS_WITH_AS(scan_dataset(dir.path(), {"nope"}), doctest::Contains("nope"), std::runtime_error);
}

TEST_CASE("scan_dataset errors") {
    ScratchDir dir("scan_err");
    fs::create_directories(dir.path() / "empty" / "train" / "good");
    CHECK_THROWS_WITH_AS(scan_dataset(dir.path()), doctest::Contains("empty"), std::runtime_error);

    ScratchDir dir2("scan_mask");
    small_tree(dir2.path());
    fs::remove(dir2.path() / "widget" / "ground_truth" / "scratch" / "d1_mask.png");
    CHECK_THROWS_WITH_AS(scan_dataset(dir2.path()), doctest::Contains("mask"), std::runtime_error);

    ScratchDir dir3("scan_bad");
    small_tree(dir3.path());
    std::ofstream(dir3.path() / "widget" / "test" / "good" / "zz.png") << "not a png";
    CHECK_THROWS_AS(scan_dataset(dir3.path()), std::runtime_error);
}

TEST_CASE("synthetic fixture round-trips through the index and the loaders") {
    ScratchDir dir("fixture");
    SyntheticSpec spec;
    spec.train_count = 6;
    spec.test_good = 2;
    spec.test_defect = 3;
    write_synthetic_dataset(dir.path(), spec);
    const DatasetIndex index = scan_dataset(dir.path());
    const CategoryIndex& c = index.category(spec.category);
    CHECK(c.train_normal.size() == 6);
    CHECK(c.anomalous_count() == 3);
    for (const fs::path& p : c.train_normal) CHECK(load_sample(p, 0).height() == spec.side);
    for (const TestItem& item : c.test_items) {
        const ImageTensor img = load_sample(item.image_path, 0);
        CHECK(img.width() == spec.side);
        if (item.mask_path) {
            const Tensor m = load_mask(*item.mask_path, spec.side);
            double on = 0.0;
            for (double v : m.values()) on += v;
            CHECK(on > 0.0);
        }
    }
}

TEST_CASE("load_sample scaling, short-circuit and resize oracle") {
    ScratchDir dir("sample");
    std::vector<std::uint8_t> rgb(40 * 36 * 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<std::uint8_t>((i * 37) % 256);
    rgb[0] = 255;
    png::write_rgb8(dir / "a.png", 40, 36, rgb);
    const ImageTensor native = load_sample(dir / "a.png", 0);
    CHECK(native.data.at(0, 0, 0) == 1.0);
    CHECK(native.data.shape() == Shape{3, 36, 40});
    CHECK(native.data.at(1, 2, 3) == static_cast<double>(rgb[(2 * 40 + 3) * 3 + 1]) / 255.0);

    gray_png(dir / "g.png", 48, 48, 51);
    const ImageTensor gray = load_sample(dir / "g.png", 48);
    CHECK(gray.data == Tensor::chw(3, 48, 48, 0.2));

    std::vector<std::uint8_t> big(700 * 500 * 3);
    for (std::size_t y = 0; y < 500; ++y) {
        for (std::size_t x = 0; x < 700; ++x) {
            for (std::size_t c = 0; c < 3; ++c) big[(y * 700 + x) * 3 + c] = static_cast<std::uint8_t>((x + y + 40 * c) % 256);
        }
    }
    png::write_rgb8(dir / "big.png", 700, 500, big);
    const ImageTensor resized = load_sample(dir / "big.png");
    CHECK(resized.data.shape() == Shape{3, 640, 640});
    const Tensor source = load_sample(dir / "big.png", 0).data;
    // Corner pixels against the direct triangle-filter oracle.
    const Tensor oracle = naive_antialiased(source, 640, 640);
    for (std::size_t c = 0; c < 3; ++c) {
        for (auto [y, x] : {std::pair<std::size_t, std::size_t>{0, 0}, {0, 639}, {639, 0}, {639, 639}}) {
            CHECK(std::abs(resized.data.at(c, y, x) - oracle.at(c, y, x)) < 1e-3);
        }
    }
    CHECK_THROWS_AS(load_sample(dir / "missing.png"), std::runtime_error);
}

TEST_CASE("load_mask thresholds and resizes by nearest neighbour") {
    ScratchDir dir("mask");
    gray_png(dir / "zero.png", 8, 8, 0);
    gray_png(dir / "full.png", 8, 8, 255);
    CHECK(load_mask(dir / "zero.png", 16) == Tensor::chw(1, 16, 16, 0.0));
    CHECK(load_mask(dir / "full.png", 16) == Tensor::chw(1, 16, 16, 1.0));
    png::write_gray8(dir / "diag.png", 2, 2, {255, 0, 0, 255});
    const Tensor m = load_mask(dir / "diag.png", 4);
    const double expected[4][4] = {{1, 1, 0, 0}, {1, 1, 0, 0}, {0, 0, 1, 1}, {0, 0, 1, 1}};
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) CHECK(m.at(0, y, x) == expected[y][x]);
    }
    png::write_gray8(dir / "edge.png", 2, 1, {127, 128});
    const Tensor e = load_mask(dir / "edge.png", 0);
    CHECK(e[0] == 0.0);
    CHECK(e[1] == 1.0);
}

TEST_CASE("manifest layout") {
    ScratchDir dir("manifest");
    gray_png(dir / "imgs" / "a.png", 32, 32, 10);
    gray_png(dir / "imgs" / "b.png", 32, 32, 10);
    gray_png(dir / "imgs" / "c.png", 32, 32, 10);
    gray_png(dir / "imgs" / "c_mask.png", 32, 32, 255);
    std::ofstream(dir / "m.json") << R"({"items": [
        {"category": "x", "split": "train", "image": "imgs/a.png", "label": "good"},
        {"category": "x", "split": "test", "image": "imgs/b.png", "label": "good"},
        {"category": "x", "split": "test", "image": "imgs/c.png", "label": "dent", "mask": "imgs/c_mask.png"}]})";
    const DatasetIndex index = load_manifest(dir / "m.json");
    const CategoryIndex& c = index.category("x");
    CHECK(c.train_normal.size() == 1);
    CHECK(c.test_items.size() == 2);
    CHECK(c.test_items[1].defect_type == "dent");
    CHECK(c.test_items[1].mask_path == dir / "imgs" / "c_mask.png");

    std::ofstream(dir / "bad.json") << R"({"items": [
        {"category": "x", "split": "train", "image": "imgs/a.png", "label": "good"},
        {"category": "x", "split": "test", "image": "imgs/c.png", "label": "dent"}]})";
    CHECK_THROWS_WITH_AS(load_manifest(dir / "bad.json"), doctest::Contains("mask"), std::runtime_error);
    std::ofstream(dir / "leak.json") << R"({"items": [
        {"category": "x", "split": "train", "image": "imgs/a.png", "label": "good"},
        {"category": "x", "split": "test", "image": "imgs/a.png", "label": "good"}]})";
    CHECK_THROWS_WITH_AS(load_manifest(dir / "leak.json"), doctest::Contains("both"), std::runtime_error);
}

TEST_CASE("shuffles are seeded permutations and training never sees test items") {
    const auto a = shuffled_order(50, 3, 1);
    CHECK(a == shuffled_order(50, 3, 1));
    CHECK(a != shuffled_order(50, 3, 2));
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 50);

    ScratchDir dir("purity");
    small_tree(dir.path());
    const DatasetIndex index = scan_dataset(dir.path());
    const auto train = training_samples(index);
    std::set<fs::path> test_paths;
    for (const TestItem& item : index.category("widget").test_items) test_paths.insert(item.image_path);
    for (int epoch = 0; epoch < 3; ++epoch) {
        for (std::size_t i : shuffled_order(train.size(), 1, static_cast<std::uint64_t>(epoch))) {
            CHECK_FALSE(test_paths.count(train[i].path));
            CHECK(train[i].path.parent_path().filename() == "good");
        }
    }
    CHECK(training_samples(index, {"widget"}).size() == 3);
}
