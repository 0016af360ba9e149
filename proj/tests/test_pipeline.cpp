#include <doctest.h>

#include "fungi/error.hpp"
#include "fungi/pipeline.hpp"
#include "fungi/store.hpp"
#include "helpers.hpp"

using namespace fungi;

namespace {

struct Split {
    Dataset train, test;
};

Split data(const RunConfig& c, std::size_t n_train, std::size_t n_test) {
    SynthParams p;
    p.kind = c.synth_kind;
    p.classes = c.synth_classes;
    p.image_size = c.synth_image_size;
    p.seed = derive_seed(c.seed, "synth");
    p.cell = c.synth_image_size / c.encoder.grid();
    p.n = n_train;
    Split s{synth_dataset(p, "train"), {}};
    p.n = n_test;
    s.test = synth_dataset(p, "test");
    return s;
}

double row_value(const EvalReport& r, const std::string& name) {
    for (const auto& row : r.rows) {
        if (row.name == name) return row.value;
    }
    FAIL("missing row " << name);
    return 0;
}

}  // namespace

TEST_CASE("extraction is deterministic and independent of the worker count") {
    const auto c = testing::desk_config();
    const auto d = data(c, 12, 4);
    const auto a = extract_features(c, d.train, d.train, 1);
    const auto b = extract_features(c, d.train, d.train, 3);
    CHECK(bank_to_store(a).serialize() == bank_to_store(b).serialize());
    auto c2 = c;
    c2.seed = 1;
    CHECK(extract_features(c2, d.train, d.train, 2).fused.values() != a.fused.values());
}

TEST_CASE("bank layout follows the objective list") {
    auto c = testing::desk_config();
    const auto d = data(c, 6, 4);
    const auto full = extract_features(c, d.train, d.train, 2);
    CHECK(full.objectives == std::vector<std::string>{"kl", "dino", "simclr"});
    CHECK(full.gradients.size() == 3);
    CHECK(full.dim() == 4 * c.encoder.dim);
    CHECK(full.gradient_source == "blocks.1.attn_proj");
    // Each fused segment is unit length.
    for (std::size_t s = 0; s < 4; ++s) {
        double n = 0;
        for (std::size_t j = 0; j < c.encoder.dim; ++j) n += full.fused.at(0, s * c.encoder.dim + j) * full.fused.at(0, s * c.encoder.dim + j);
        CHECK(n == doctest::Approx(1.0).epsilon(1e-9));
    }
    c.set("objectives", "set", "kl");
    const auto kl = extract_features(c, d.train, d.train, 2);
    CHECK(kl.gradients.size() == 1);
    CHECK(kl.dim() == 2 * c.encoder.dim);
    // Shared segments agree across objective sets: projections are seeded per objective.
    CHECK(kl.gradients[0].values() == full.gradients[0].values());
}

TEST_CASE("collapsed attention: gradients recover what the embedding lost") {
    auto c = testing::desk_config();
    c.set("backbone", "collapse_attention", "true");
    const auto d = data(c, 60, 40);
    const auto tr = extract_features(c, d.train, d.train, 4), te = extract_features(c, d.test, d.train, 4);
    const auto r = eval_knn(c, tr, te, 4);
    CHECK(row_value(r, "fungi") >= row_value(r, "embedding") + 0.20);
}

TEST_CASE("full-width PCA keeps kNN predictions and reduced banks are rejected") {
    // Full width needs more samples than fused dimensions; KL alone keeps that cheap.
    auto c = testing::desk_config();
    c.set("objectives", "set", "kl");
    const auto d = data(c, 150, 40);
    const auto tr = extract_features(c, d.train, d.train, 4), te = extract_features(c, d.test, d.train, 4);
    const auto out = fuse_pca(tr, te, tr.dim());
    CHECK(out.train.pca_dim == tr.dim());
    const auto before = eval_knn(c, tr, te), after = eval_knn(c, out.train, out.test);
    CHECK(row_value(after, "fungi") == row_value(before, "fungi"));
    CHECK_THROWS_AS(fuse_pca(out.train, out.test, 8), DataError);
    CHECK_THROWS_AS(fuse_pca(tr, te, 0), ConfigError);
}

TEST_CASE("banks from different configurations are refused") {
    auto c = testing::desk_config();
    const auto d = data(c, 6, 4);
    const auto tr = extract_features(c, d.train, d.train, 2);
    auto c2 = c;
    c2.set("kl", "tau", "10");
    const auto te = extract_features(c2, d.test, d.train, 2);
    CHECK_THROWS_AS(check_compatible(tr, te), DataError);
    CHECK_THROWS_AS(eval_knn(c, tr, te), DataError);
    // Bank matches itself but not the run configuration.
    CHECK_THROWS_AS(eval_knn(c2, tr, tr), ConfigError);
}

TEST_CASE("report rows and attachments") {
    const auto c = testing::desk_config();
    const auto d = data(c, 20, 8);
    const auto tr = extract_features(c, d.train, d.train, 4), te = extract_features(c, d.test, d.train, 4);
    const auto r = eval_knn(c, tr, te);
    std::vector<std::string> names;
    for (const auto& row : r.rows) names.push_back(row.name);
    CHECK(names == std::vector<std::string>{"embedding", "grad.kl", "grad.dino", "grad.simclr", "fungi"});
    CHECK(!r.rows[0].delta.has_value());
    CHECK(*r.rows[4].delta == doctest::Approx(r.rows[4].value - r.rows[0].value));
    REQUIRE(r.attachments.size() == 1);
    CHECK(r.attachments[0].first == ".per_class.csv");
    const auto cka = eval_cka(c, tr);
    CHECK(cka.rows.size() == 10);
    for (const auto& row : cka.rows) {
        CHECK(row.value >= -1e-12);
        CHECK(row.value <= 1 + 1e-12);
    }
}

TEST_CASE("segmentation self-bank recovers its own labels") {
    auto c = testing::desk_config();
    c.set("synth", "kind", "segmentation");
    c.set("segmentation", "index", "exact");
    const auto d = data(c, 10, 4);
    const auto r = eval_segment(c, d.train, d.test, 4);
    CHECK(row_value(r, "self_bank_k1") == doctest::Approx(1.0));
    CHECK(row_value(r, "embedding") > 0.0);
    CHECK(row_value(r, "fungi") > 0.0);
}
