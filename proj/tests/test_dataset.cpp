#include "cnnaudit/dataset.hpp"
#include "cnnaudit/errors.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <numeric>

using namespace cnnaudit;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

void write(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
}

void touch_images(const TempDir& dir, std::initializer_list<const char*> names) {
    for (const char* n : names) {
        testsupport::touch_png(dir / n);
    }
}

std::vector<ImageRecord> smiling_records(std::size_t with, std::size_t without, std::size_t others) {
    std::vector<ImageRecord> plain;
    const auto add = [&](std::size_t label, bool attr) {
        ImageRecord r;
        r.true_label = label;
        r.attributes = {{"blond", attr}};
        plain.push_back(r);
    };
    for (std::size_t i = 0; i < with; ++i) add(1, true);
    for (std::size_t i = 0; i < without; ++i) add(1, false);
    for (std::size_t i = 0; i < others; ++i) add(0, i % 2 == 0);
    // stride 7 permutation so that the kept records have to come back in input order
    const std::size_t n = plain.size();
    REQUIRE(std::gcd(n, std::size_t{7}) == 1);
    std::vector<ImageRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        ImageRecord r = plain[(i * 7) % n];
        r.image_id = "r" + std::to_string(i);
        r.path = r.image_id + ".png";
        out.push_back(r);
    }
    return out;
}

} // namespace

TEST_CASE("CSV manifest: rows load in file order with attributes") {
    TempDir dir("csv");
    touch_images(dir, {"a.png", "b.png", "c.png"});
    write(dir / "m.csv",
          "# manifest_version: 1\n# classes: not_smiling,smiling\n"
          "image_id,path,label,split,blond,male\n"
          "img_b,b.png,1,audit,1,0\n"
          "img_a,a.png,0,train,false,true\n"
          "\"img,c\",c.png,1,audit,,1\n");
    const Dataset ds = load_dataset(dir / "m.csv");
    CHECK(ds.class_names == std::vector<std::string>{"not_smiling", "smiling"});
    REQUIRE(ds.records.size() == 3);
    CHECK(ds.records[0].image_id == "img_b");
    CHECK(ds.records[1].image_id == "img_a");
    CHECK(ds.records[2].image_id == "img,c");
    CHECK(ds.records[0].path == dir / "b.png");
    CHECK(ds.records[0].attributes == std::map<std::string, bool>{{"blond", true}, {"male", false}});
    CHECK(ds.records[1].split == Split::Train);
    CHECK(ds.records[2].attributes == std::map<std::string, bool>{{"male", true}});
    CHECK(ds.errors.empty());
}

TEST_CASE("JSONL manifest loads the same records") {
    TempDir dir("jsonl");
    touch_images(dir, {"a.png", "b.png"});
    write(dir / "m.jsonl",
          "{\"manifest_version\":1,\"class_names\":[\"x\",\"y\"]}\n"
          "{\"image_id\":\"a\",\"path\":\"a.png\",\"label\":0,\"split\":\"audit\",\"attributes\":{\"red\":true}}\n"
          "\n"
          "{\"image_id\":\"b\",\"path\":\"b.png\",\"label\":1,\"split\":\"train\"}\n");
    const Dataset ds = load_dataset(dir / "m.jsonl");
    REQUIRE(ds.records.size() == 2);
    CHECK(ds.records[0].attributes.at("red"));
    CHECK(ds.records[1].true_label == 1);
    CHECK(ds.records[1].split == Split::Train);
}

TEST_CASE("duplicate ids are fatal and name the id") {
    TempDir dir("dup");
    touch_images(dir, {"a.png"});
    write(dir / "m.csv", "# manifest_version: 1\n# classes: a,b\nimage_id,path,label,split\nx,a.png,0,audit\nx,a.png,1,audit\n");
    try {
        load_dataset(dir / "m.csv");
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("'x'") != std::string::npos);
    }
}

TEST_CASE("missing image files are reported while the rest load") {
    TempDir dir("missing");
    touch_images(dir, {"a.png", "c.png"});
    write(dir / "m.csv",
          "# manifest_version: 1\n# classes: a,b\nimage_id,path,label,split\n"
          "a,a.png,0,audit\nb,b.png,1,audit\nc,c.png,1,audit\n");
    const Dataset ds = load_dataset(dir / "m.csv");
    REQUIRE(ds.records.size() == 2);
    CHECK(ds.records[0].image_id == "a");
    CHECK(ds.records[1].image_id == "c");
    REQUIRE(ds.errors.size() == 1);
    CHECK(ds.errors[0].image_id == "b");
}

TEST_CASE("malformed manifests are rejected") {
    TempDir dir("bad");
    touch_images(dir, {"a.png"});
    const std::string body = "image_id,path,label,split\na,a.png,0,audit\n";
    write(dir / "noversion.csv", "# classes: a,b\n" + body);
    CHECK_THROWS_AS(load_dataset(dir / "noversion.csv"), ParseError);
    write(dir / "future.csv", "# manifest_version: 2\n# classes: a,b\n" + body);
    CHECK_THROWS_AS(load_dataset(dir / "future.csv"), VersionError);
    write(dir / "wordy.csv", "# manifest_version: one\n# classes: a,b\n" + body);
    CHECK_THROWS_AS(load_dataset(dir / "wordy.csv"), ParseError);
    write(dir / "label.csv", "# manifest_version: 1\n# classes: a,b\nimage_id,path,label,split\na,a.png,5,audit\n");
    CHECK_THROWS_AS(load_dataset(dir / "label.csv"), ValidationError);
    write(dir / "split.csv", "# manifest_version: 1\n# classes: a,b\nimage_id,path,label,split\na,a.png,0,test\n");
    CHECK_THROWS_AS(load_dataset(dir / "split.csv"), ParseError);
    write(dir / "flag.csv", "# manifest_version: 1\n# classes: a,b\nimage_id,path,label,split,red\na,a.png,0,audit,maybe\n");
    CHECK_THROWS_AS(load_dataset(dir / "flag.csv"), ParseError);
    CHECK_THROWS_AS(load_dataset(dir / "absent.csv"), ParseError);
}

TEST_CASE("written manifests load back identically") {
    TempDir dir("write");
    touch_images(dir, {"images/a.png", "images/b.png"});
    std::vector<ImageRecord> records = {
        {"a", dir / "images/a.png", 1, {{"red", true}, {"tall", false}}, Split::Train},
        {"b", dir / "images/b.png", 0, {{"red", false}}, Split::Audit},
    };
    write_manifest_csv(dir / "m.csv", {"neg", "pos"}, records);
    const Dataset ds = load_dataset(dir / "m.csv");
    CHECK(ds.class_names == std::vector<std::string>{"neg", "pos"});
    REQUIRE(ds.records.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(fs::equivalent(ds.records[i].path, records[i].path));
        records[i].path = ds.records[i].path;
        CHECK(ds.records[i] == records[i]);
    }
}

TEST_CASE("inject_bias: natural target is a no-op") {
    const auto records = smiling_records(50, 50, 30);
    const double natural = cooccurrence(records, "blond", 1);
    CHECK(natural == doctest::Approx(0.5));
    CHECK(inject_bias(records, {"blond", 1, natural, 3}) == records);
}

TEST_CASE("inject_bias: 50 of 100 to 0.8 keeps all positives and 13 negatives") {
    const auto records = smiling_records(50, 50, 30);
    const auto out = inject_bias(records, {"blond", 1, 0.8, 42});
    std::size_t pos = 0, neg = 0, others = 0;
    for (const auto& r : out) {
        if (r.true_label != 1) {
            ++others;
        } else if (r.attributes.at("blond")) {
            ++pos;
        } else {
            ++neg;
        }
    }
    CHECK(pos == 50);
    CHECK(others == 30);
    // 50/62 = 0.8065 and 50/63 = 0.7937; 63 is nearer to 0.8.
    CHECK(neg == 13);
    CHECK(cooccurrence(out, "blond", 1) == doctest::Approx(50.0 / 63.0));

    // Order is preserved: the output is a subsequence of the input.
    std::size_t j = 0;
    for (const auto& r : records) {
        if (j < out.size() && out[j] == r) {
            ++j;
        }
    }
    CHECK(j == out.size());

    CHECK(inject_bias(records, {"blond", 1, 0.8, 42}) == out);
    CHECK(inject_bias(records, {"blond", 1, 0.8, 43}) != out);
}

TEST_CASE("inject_bias: unreachable targets report the achievable range") {
    const auto records = smiling_records(50, 50, 30);
    try {
        inject_bias(records, {"blond", 1, 0.3, 1});
        FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("0.5") != std::string::npos);
    }
    CHECK_THROWS_AS(inject_bias(records, {"blond", 1, 0.0, 1}), ConfigError);
    CHECK_THROWS_AS(inject_bias(records, {"blond", 7, 0.8, 1}), ConfigError);
    CHECK_THROWS_AS(inject_bias(records, {"bald", 1, 0.8, 1}), ValidationError);
    // 2 positives, 2 negatives: 0.7 is 0.033 away from the closest (2/3).
    CHECK_THROWS_AS(inject_bias(smiling_records(2, 2, 0), {"blond", 1, 0.7, 1}), ConfigError);
    CHECK(cooccurrence(inject_bias(records, {"blond", 1, 1.0, 1}), "blond", 1) == 1.0);
}
