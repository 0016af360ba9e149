#include <doctest.h>

#include <fstream>
#include <sstream>

#include "fungi/config.hpp"
#include "fungi/error.hpp"
#include "helpers.hpp"

using namespace fungi;

namespace {

std::string golden() {
    std::ifstream in(std::string(FUNGI_GOLDEN_DIR) + "/default_config.ini");
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string error_of(std::string_view text) {
    try {
        RunConfig::parse(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("defaults carry the published hyperparameters") {
    const RunConfig c;
    CHECK(c.simclr.patchify.grid * c.simclr.patchify.grid == 49);
    CHECK(c.simclr.negative_images == 256);
    CHECK(c.simclr.tau == 0.07);
    CHECK(c.simclr.proj_dim == 96);
    CHECK(c.kl.tau == 15.0);
    CHECK(c.kl.proj_dim == 768);
    CHECK(c.dino.crops.global_count == 2);
    CHECK(c.dino.crops.local_count == 10);
    CHECK(c.dino.crops.global_scale == std::pair{0.25, 1.0});
    CHECK(c.dino.crops.local_scale == std::pair{0.05, 0.25});
    CHECK(c.dino.tau_teacher == 0.07);
    CHECK(c.dino.tau_student == 0.1);
    CHECK(c.dino.proj_dim == 2048);
    CHECK(c.knn_k == 20);
    CHECK(c.shots == 5);
    CHECK(c.pca_dim_vit_s == 384);
    CHECK(c.pca_dim_vit_b == 512);
    CHECK(c.seg_full.k == 30);
    CHECK(c.seg_full.tau == 0.02);
    CHECK(c.seg_few_shot.k == 90);
    CHECK(c.seg_few_shot.tau == 0.1);
    CHECK(c.seg_full.ivf.num_leaves == 512);
    CHECK(c.seg_full.ivf.leaves_to_search == 32);
    CHECK(c.seg_full.ivf.rerank == 120);
    CHECK(c.probe.lambda_min == 5e-6);
    CHECK(c.probe.lambda_max == 5e-4);
}

TEST_CASE("default config serialises to the golden file") { CHECK(RunConfig().to_ini() == golden()); }

TEST_CASE("parse inverts to_ini") {
    auto c = testing::desk_config();
    c.set("run", "seed", "42");
    c.set("objectives", "set", "simclr,kl");
    c.set("projection", "kind", "sparse");
    c.set("segmentation", "mode", "few_shot");
    const auto back = RunConfig::parse(c.to_ini());
    CHECK(back.to_ini() == c.to_ini());
    CHECK(back.seed == 42);
    CHECK(back.objectives == std::vector<ObjectiveKind>{ObjectiveKind::simclr, ObjectiveKind::kl});
    CHECK(back.extraction_hash() == c.extraction_hash());
}

TEST_CASE("errors name the offending line") {
    CHECK(error_of("[run]\nseed = 1\n[kl]\ntau\n").find("line 4") != std::string::npos);
    CHECK(error_of("[run]\nseed = 1\nseed = 2\n").find("line 3: duplicate key run.seed") != std::string::npos);
    CHECK(error_of("[kl]\nwidth = 3\n").find("unknown key kl.width") != std::string::npos);
    CHECK(error_of("[kl\n").find("line 1") != std::string::npos);
    CHECK(error_of("[kl]\ntau = hot\n").find("line 2") != std::string::npos);
    CHECK(error_of("[objectives]\nset = kl,kl\n").find("twice") != std::string::npos);
    CHECK(error_of("[dino]\ncrop_size = 96\n").find("crop_size") != std::string::npos);
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.ini"), ConfigError);
}

TEST_CASE("comments and blank lines are ignored") {
    const auto c = RunConfig::parse("# header\n\n[run]\n  seed = 9  \n; other comment\n");
    CHECK(c.seed == 9);
}

TEST_CASE("extraction hash tracks only feature-relevant keys") {
    RunConfig a;
    const auto h = a.extraction_hash();
    a.set("eval", "knn_k", "5");
    CHECK(a.extraction_hash() == h);
    a.set("kl", "tau", "10");
    CHECK(a.extraction_hash() != h);
    RunConfig b;
    b.set("run", "seed", "1");
    CHECK(b.extraction_hash() != h);
}

TEST_CASE("get mirrors set") {
    RunConfig c;
    c.set("pca", "dim", "128");
    CHECK(c.get("pca", "dim") == "128");
    CHECK(c.resolved_pca_dim() == 128);
    c.set("pca", "dim", "0");
    CHECK(c.resolved_pca_dim() == 384);
    c.set("pca", "backbone_tag", "vit_b");
    CHECK(c.resolved_pca_dim() == 512);
    CHECK_THROWS_AS(c.get("pca", "width"), ConfigError);
}
