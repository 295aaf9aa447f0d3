#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "exprbench/data.hpp"

#include "testutil.hpp"

using namespace exprbench;

namespace {

std::string fer_row(int emotion, int fill, const std::string& usage,
                    int count = 2304) {
    std::string row = std::to_string(emotion) + ",";
    for (int k = 0; k < count; ++k)
        row += (k ? " " : "") + std::to_string(fill);
    return row + "," + usage;
}

} // namespace

TEST_CASE("fer csv loads rows and keeps usage", "[data][fer]") {
    testutil::TempDir tmp("fer");
    std::string path = tmp.str("t.csv");
    {
        std::ofstream out(path);
        out << "emotion,pixels,Usage\n";
        out << fer_row(0, 0, "Training") << "\n";
        out << fer_row(3, 17, "PublicTest") << "\n";
        out << fer_row(6, 255, "PrivateTest") << "\n";
    }
    LoadReport rep = load_fer_csv(path);
    REQUIRE(rep.row_errors.empty());
    REQUIRE(rep.dataset.samples.size() == 3);
    const Sample& s0 = rep.dataset.samples[0];
    REQUIRE(s0.image.width == 48);
    REQUIRE(s0.image.height == 48);
    for (auto p : s0.image.pixels)
        REQUIRE(p == 0);
    REQUIRE(s0.usage == "Training");
    REQUIRE(s0.label == 0);
    REQUIRE(rep.dataset.samples[2].label == 6);
    REQUIRE(rep.dataset.samples[2].usage == "PrivateTest");

    Dataset train = subset_by_usage(rep.dataset, {"Training", "PublicTest"});
    REQUIRE(train.samples.size() == 2);
    auto hist = rep.dataset.class_histogram();
    REQUIRE(hist[0] == 1);
    REQUIRE(hist[3] == 1);
    REQUIRE(hist[6] == 1);
}

TEST_CASE("fer csv reports malformed rows by number", "[data][fer]") {
    testutil::TempDir tmp("ferbad");
    std::string path = tmp.str("bad.csv");
    {
        std::ofstream out(path);
        out << "emotion,pixels,Usage\n";
        out << fer_row(0, 1, "Training") << "\n";
        out << fer_row(2, 9, "Training", 2303) << "\n"; // short pixel row
        out << fer_row(7, 1, "Training") << "\n";       // bad emotion
    }
    LoadReport rep = load_fer_csv(path);
    REQUIRE(rep.dataset.samples.size() == 1);
    REQUIRE(rep.row_errors.size() == 2);
    REQUIRE(rep.row_errors[0].find("row 2") != std::string::npos);
    REQUIRE(rep.row_errors[0].find("2303") != std::string::npos);
    REQUIRE(rep.row_errors[1].find("row 3") != std::string::npos);
    // no silent drops: samples + errors == row count
    REQUIRE(rep.dataset.samples.size() + rep.row_errors.size() == 3);

    REQUIRE_THROWS_AS(load_fer_csv(tmp.str("missing.csv")),
                      std::runtime_error);
}

TEST_CASE("image directory layout with landmarks", "[data][dir]") {
    testutil::TempDir tmp("dir");
    Rng rng(4);
    for (std::size_t c = 0; c < class_names().size(); ++c) {
        std::filesystem::create_directories(tmp.str(class_names()[c]));
        GrayImage img(48, 48);
        for (auto& p : img.pixels)
            p = static_cast<std::uint8_t>(rng.next_below(256));
        write_pgm(img, tmp.str(class_names()[c] + "/img0.pgm"));
    }
    // extend one class with a landmarked image
    GrayImage lmimg(64, 64, 10);
    write_pgm(lmimg, tmp.str("happy/lm.pgm"));
    std::string sidecar = tmp.str("landmarks.csv");
    {
        std::ofstream out(sidecar);
        out << "filename,lx,ly,rx,ry\n";
        out << "lm.pgm,20,30,44,30\n";
    }

    LoadReport rep = load_image_dir(tmp.str(), sidecar);
    REQUIRE(rep.row_errors.empty());
    REQUIRE(rep.dataset.samples.size() == 8);
    auto hist = rep.dataset.class_histogram();
    for (std::size_t c = 0; c < 7; ++c)
        REQUIRE(hist[c] == (class_names()[c] == "happy" ? 2 : 1));

    int with_lm = 0, without_lm = 0;
    for (const Sample& s : rep.dataset.samples)
        s.landmarks ? ++with_lm : ++without_lm;
    REQUIRE(with_lm == 1);
    REQUIRE(without_lm == 7);
}

TEST_CASE("image directory validation errors", "[data][dir]") {
    testutil::TempDir tmp("dirbad");
    std::filesystem::create_directories(tmp.str("smirk"));
    REQUIRE_THROWS_WITH(load_image_dir(tmp.str()),
                        Catch::Matchers::ContainsSubstring("smirk"));

    testutil::TempDir tmp2("dirbad2");
    std::filesystem::create_directories(tmp2.str("angry"));
    write_pgm(GrayImage(48, 48, 1), tmp2.str("angry/a.pgm"));
    std::string dup = tmp2.str("lm.csv");
    {
        std::ofstream out(dup);
        out << "a.pgm,1,2,3,2\n";
        out << "a.pgm,1,2,3,2\n";
    }
    REQUIRE_THROWS_WITH(load_image_dir(tmp2.str(), dup),
                        Catch::Matchers::ContainsSubstring("duplicate"));

    std::string missing = tmp2.str("lm2.csv");
    {
        std::ofstream out(missing);
        out << "ghost.pgm,1,2,3,2\n";
    }
    REQUIRE_THROWS_WITH(load_image_dir(tmp2.str(), missing),
                        Catch::Matchers::ContainsSubstring("ghost.pgm"));

    // unreadable image is a recorded row error, not a throw
    {
        std::ofstream out(tmp2.str("angry/broken.pgm"));
        out << "hello";
    }
    LoadReport rep = load_image_dir(tmp2.str());
    REQUIRE(rep.dataset.samples.size() == 1);
    REQUIRE(rep.row_errors.size() == 1);
}

TEST_CASE("registration maps canonical eyes to identity", "[data][register]") {
    GrayImage face = testutil::synthetic_face();
    Landmarks lm;
    lm.left_x = 24.0 - 9.6;
    lm.left_y = 19.2;
    lm.right_x = 24.0 + 9.6;
    lm.right_y = 19.2;
    GrayImage out = register_face(face, lm);
    REQUIRE(out.width == 48);
    REQUIRE(out.height == 48);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x)
            REQUIRE(std::abs(int(out.at(y, x)) - int(face.at(y, x))) <= 1);
}

TEST_CASE("registration levels a rotated eye line", "[data][register]") {
    // rotate the canonical landmarks by +10 degrees about the midpoint
    const double deg = 10.0 * 3.14159265358979323846 / 180.0;
    const double c = std::cos(deg), s = std::sin(deg);
    auto rot = [&](double x, double y, double& ox, double& oy) {
        double dx = x - 24.0, dy = y - 19.2;
        ox = 24.0 + c * dx - s * dy;
        oy = 19.2 + s * dx + c * dy;
    };
    Landmarks lm;
    rot(24.0 - 9.6, 19.2, lm.left_x, lm.left_y);
    rot(24.0 + 9.6, 19.2, lm.right_x, lm.right_y);

    Affine fwd = registration_transform(lm);
    double lx, ly, rx, ry;
    fwd.apply(lm.left_x, lm.left_y, lx, ly);
    fwd.apply(lm.right_x, lm.right_y, rx, ry);
    REQUIRE_THAT(ly, Catch::Matchers::WithinAbs(19.2, 0.5));
    REQUIRE_THAT(ry, Catch::Matchers::WithinAbs(19.2, 0.5));
    REQUIRE_THAT(std::abs(ly - ry), Catch::Matchers::WithinAbs(0.0, 0.5));
    REQUIRE_THAT(rx - lx, Catch::Matchers::WithinAbs(19.2, 0.01));

    Landmarks degenerate;
    degenerate.left_x = degenerate.right_x = 10;
    degenerate.left_y = degenerate.right_y = 10;
    REQUIRE_THROWS_AS(registration_transform(degenerate),
                      std::invalid_argument);
}

TEST_CASE("registration stays deterministic and in range",
          "[data][register]") {
    GrayImage face = testutil::synthetic_face();
    Landmarks lm{12.0, 22.0, 35.0, 17.0};
    GrayImage a = register_face(face, lm);
    GrayImage b = register_face(face, lm);
    REQUIRE(a == b);
}

TEST_CASE("augment produces the ten tagged crops", "[data][augment]") {
    GrayImage face = testutil::synthetic_face();
    Sample s;
    s.image = face;
    s.label = 4;
    s.source_id = "x";
    auto children = augment(s);
    REQUIRE(children.size() == 10);
    std::set<CropTag> tags;
    for (const Sample& c : children) {
        REQUIRE(c.image.width == 42);
        REQUIRE(c.image.height == 42);
        REQUIRE(c.label == 4);
        REQUIRE(c.source_id == "x");
        tags.insert(c.tag);
    }
    REQUIRE(tags.size() == 10);
    REQUIRE(tags.count(CropTag::original) == 0);

    // crops are pure pixel subsets of the parent
    const Sample* tl = nullptr;
    for (const Sample& c : children)
        if (c.tag == CropTag::tl)
            tl = &c;
    REQUIRE(tl != nullptr);
    for (int r = 0; r < 42; ++r)
        for (int c2 = 0; c2 < 42; ++c2)
            REQUIRE(tl->image.at(r, c2) == face.at(r, c2));

    GrayImage wrong(47, 48);
    Sample bad;
    bad.image = wrong;
    REQUIRE_THROWS_AS(augment(bad), std::invalid_argument);
}

TEST_CASE("flip is an involution and symmetric images match center crops",
          "[data][augment]") {
    GrayImage face = testutil::synthetic_face();
    REQUIRE(hflip(hflip(face)) == face);

    // horizontally symmetric input
    GrayImage sym(48, 48);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x)
            sym.at(y, x) = static_cast<std::uint8_t>(
                (std::min(x, 47 - x) * 5 + y * 2) % 256);
    Sample s;
    s.image = sym;
    auto children = augment(s);
    const GrayImage *center = nullptr, *center_f = nullptr;
    for (const Sample& c : children) {
        if (c.tag == CropTag::center)
            center = &c.image;
        if (c.tag == CropTag::center_f)
            center_f = &c.image;
    }
    REQUIRE(*center == *center_f);
}

TEST_CASE("epoch split arithmetic and partition properties",
          "[data][split]") {
    // 100 sources x 10 crops
    Dataset ds;
    ds.name = "t";
    for (int i = 0; i < 100; ++i)
        for (int c = 0; c < 10; ++c) {
            Sample s;
            s.image = GrayImage(42, 42, static_cast<std::uint8_t>(i));
            s.label = i % 7;
            s.source_id = "src" + std::to_string(i);
            s.tag = CropTag::center;
            ds.samples.push_back(std::move(s));
        }

    Rng rng(1);
    auto [train, val] = epoch_split(ds, 0.1, rng, SplitBy::source);
    REQUIRE(val.samples.size() == 100);
    REQUIRE(train.samples.size() == 900);

    // grouped: no source appears on both sides
    std::set<std::string> val_sources, train_sources;
    for (const Sample& s : val.samples)
        val_sources.insert(s.source_id);
    for (const Sample& s : train.samples)
        train_sources.insert(s.source_id);
    REQUIRE(val_sources.size() == 10);
    for (const auto& s : val_sources)
        REQUIRE(train_sources.count(s) == 0);

    // union is the original multiset
    REQUIRE(train.samples.size() + val.samples.size() == ds.samples.size());

    // determinism
    Rng rng2(1);
    auto [train2, val2] = epoch_split(ds, 0.1, rng2, SplitBy::source);
    REQUIRE(val2.samples.size() == val.samples.size());
    for (std::size_t i = 0; i < val.samples.size(); ++i)
        REQUIRE(val2.samples[i].source_id == val.samples[i].source_id);

    // crop-level split
    Rng rng3(2);
    auto [ctrain, cval] = epoch_split(ds, 0.1, rng3, SplitBy::crop);
    REQUIRE(cval.samples.size() == 100);

    Rng rng4(3);
    REQUIRE_THROWS_AS(epoch_split(ds, 0.0001, rng4, SplitBy::source),
                      std::invalid_argument);
    Dataset tiny;
    tiny.samples.push_back(ds.samples[0]);
    Rng rng5(4);
    REQUIRE_THROWS_AS(epoch_split(tiny, 0.5, rng5, SplitBy::source),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(epoch_split(ds, 1.5, rng5, SplitBy::source),
                      std::invalid_argument);
}

TEST_CASE("exclusion list filtering", "[data]") {
    testutil::TempDir tmp("excl");
    std::string path = tmp.str("drop.txt");
    {
        std::ofstream out(path);
        out << "# bad detections\n";
        out << "toy:1\n";
        out << "toy:3\n";
    }
    Dataset ds = testutil::toy_dataset(5, 9);
    auto drop = load_exclusion_list(path);
    Dataset kept = apply_exclusions(ds, drop);
    REQUIRE(kept.samples.size() == 3);
    for (const Sample& s : kept.samples) {
        REQUIRE(s.source_id != "toy:1");
        REQUIRE(s.source_id != "toy:3");
    }
}

TEST_CASE("pgm round trip", "[data][pgm]") {
    testutil::TempDir tmp("pgm");
    GrayImage img = testutil::synthetic_face();
    std::string path = tmp.str("f.pgm");
    write_pgm(img, path);
    GrayImage back = read_pgm(path);
    REQUIRE(back == img);

    REQUIRE_THROWS_AS(read_pgm(tmp.str("missing.pgm")), std::runtime_error);
}
