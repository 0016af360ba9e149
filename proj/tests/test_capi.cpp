// Exercises the shared library through its C header only.

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "fungi/fungi.h"

namespace {

std::string dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / ("fungi_test_capi_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d.string();
}

fungi_config_t* desk() {
    fungi_config_t* c = nullptr;
    REQUIRE(fungi_config_load(FUNGI_DESK_CONFIG, &c) == FUNGI_OK);
    REQUIRE(fungi_config_set(c, "synth", "train", "24") == FUNGI_OK);
    REQUIRE(fungi_config_set(c, "synth", "test", "8") == FUNGI_OK);
    return c;
}

}  // namespace

TEST_CASE("status codes and the last error message") {
    CHECK(std::strlen(fungi_version()) > 0);
    fungi_config_t* c = nullptr;
    CHECK(fungi_config_load("/nonexistent.ini", &c) == FUNGI_ERR_CONFIG);
    CHECK(c == nullptr);
    CHECK(std::string(fungi_last_error()).size() > 0);
    CHECK(fungi_config_parse("[kl]\ntau = -1\n", &c) == FUNGI_ERR_CONFIG);
    fungi_bank_t* b = nullptr;
    CHECK(fungi_bank_load("/nonexistent.fngi", &b) == FUNGI_ERR_DATA);
    REQUIRE(fungi_config_default(&c) == FUNGI_OK);
    CHECK(fungi_config_set(c, "kl", "nope", "1") == FUNGI_ERR_CONFIG);
    CHECK(std::string(fungi_last_error()).find("kl.nope") != std::string::npos);
    CHECK(fungi_config_set(c, nullptr, "tau", "1") != FUNGI_OK);
    fungi_config_free(c);
    fungi_config_free(nullptr);
    fungi_bank_free(nullptr);
    fungi_report_free(nullptr);
}

TEST_CASE("config get and text follow the buffer contract") {
    fungi_config_t* c = nullptr;
    REQUIRE(fungi_config_default(&c) == FUNGI_OK);
    char buf[8];
    size_t needed = 0;
    REQUIRE(fungi_config_get(c, "kl", "tau", buf, sizeof buf, &needed) == FUNGI_OK);
    CHECK(std::string(buf) == "15");
    CHECK(needed == 3);
    CHECK(fungi_config_text(c, nullptr, 0, &needed) == FUNGI_OK);
    std::vector<char> text(needed);
    REQUIRE(fungi_config_text(c, text.data(), text.size(), nullptr) == FUNGI_OK);
    CHECK(std::string(text.data()).rfind("[run]\n", 0) == 0);
    CHECK(fungi_config_text(c, buf, sizeof buf, nullptr) == FUNGI_ERR_CONFIG);
    fungi_config_t* back = nullptr;
    REQUIRE(fungi_config_parse(text.data(), &back) == FUNGI_OK);
    uint64_t h1 = 0, h2 = 0;
    fungi_config_hash(c, &h1);
    fungi_config_hash(back, &h2);
    CHECK(h1 == h2);
    fungi_config_free(back);
    fungi_config_free(c);
}

TEST_CASE("synth, extract, PCA and eval through the C interface") {
    fungi_config_t* c = desk();
    const auto d = dir("pipeline");
    REQUIRE(fungi_synth(c, d.c_str()) == FUNGI_OK);
    fungi_bank_t *tr = nullptr, *te = nullptr;
    int lines = 0;
    auto log = [](const char*, void* user) { ++*static_cast<int*>(user); };
    REQUIRE(fungi_extract(c, d.c_str(), "train", 2, log, &lines, &tr) == FUNGI_OK);
    REQUIRE(fungi_extract(c, d.c_str(), "test", 2, nullptr, nullptr, &te) == FUNGI_OK);
    CHECK(lines > 0);
    CHECK(fungi_bank_size(tr) == 24);
    CHECK(fungi_bank_dim(tr) == 256);
    uint64_t h = 0;
    fungi_config_hash(c, &h);
    CHECK(fungi_bank_config_hash(tr) == h);
    std::vector<double> row(fungi_bank_dim(tr));
    CHECK(fungi_bank_row(tr, 0, row.data()) == FUNGI_OK);
    CHECK(fungi_bank_row(tr, 24, row.data()) == FUNGI_ERR_DATA);

    fungi_report_t* r = nullptr;
    REQUIRE(fungi_eval(c, tr, te, 2, &r) == FUNGI_OK);
    double v = -1;
    CHECK(fungi_report_value(r, "fungi", "knn_top1", &v) == FUNGI_OK);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(fungi_report_value(r, "nothing", "knn_top1", &v) == FUNGI_ERR_DATA);
    CHECK(fungi_report_rows(r) == 5);
    const auto out = d + "/eval.csv";
    REQUIRE(fungi_report_save(r, out.c_str()) == FUNGI_OK);
    CHECK(std::filesystem::exists(out));
    CHECK(std::filesystem::exists(out + ".per_class.csv"));
    fungi_report_free(r);

    REQUIRE(fungi_fuse_pca(tr, te, 16, (d + "/pca.fngi").c_str()) == FUNGI_OK);
    CHECK(fungi_bank_dim(tr) == 16);
    CHECK(fungi_fuse_pca(tr, te, 8, nullptr) == FUNGI_ERR_DATA);

    // A run configuration that differs in a feature-relevant key is refused.
    fungi_config_set(c, "kl", "tau", "3");
    CHECK(fungi_eval(c, tr, te, 1, &r) == FUNGI_ERR_CONFIG);
    fungi_bank_free(tr);
    fungi_bank_free(te);
    fungi_config_free(c);
}

TEST_CASE("missing data directories are data errors") {
    fungi_config_t* c = desk();
    fungi_bank_t* b = nullptr;
    CHECK(fungi_extract(c, "/nonexistent_dir", "train", 1, nullptr, nullptr, &b) == FUNGI_ERR_DATA);
    CHECK(fungi_extract(c, "/tmp", "validation", 1, nullptr, nullptr, &b) != FUNGI_OK);
    fungi_config_free(c);
}
