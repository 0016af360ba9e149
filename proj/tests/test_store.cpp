#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fungi/error.hpp"
#include "fungi/store.hpp"
#include "helpers.hpp"

using namespace fungi;
using fungi::testing::random_tensor;

namespace {

std::filesystem::path tmp(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "fungi_test_store";
    std::filesystem::create_directories(dir);
    return dir / name;
}

FeatureBank sample_bank() {
    FeatureBank b;
    b.split = "train";
    b.config_hash = 0x1234abcd;
    b.objectives = {"kl", "simclr"};
    b.gradient_source = "blocks.1.attn_proj";
    b.projection_kind = "binary";
    b.projection_seeds = {11, 12};
    b.config_echo = "[run]\nseed = 0\n";
    for (std::int64_t i = 0; i < 5; ++i) {
        FeatureRecord r;
        r.id = 100 + i;
        r.label = static_cast<std::int32_t>(i % 2);
        r.embedding = random_tensor({3}, 10 + i).values();
        r.gradients = {random_tensor({4}, 20 + i).values(), random_tensor({4}, 30 + i).values()};
        r.fused = random_tensor({11}, 40 + i).values();
        b.append(r);
    }
    return b;
}

}  // namespace

TEST_CASE("serialisation round-trips byte for byte") {
    TensorStore s;
    s.put("a", random_tensor<float>({2, 3}, 1));
    s.put("b", random_tensor<double>({4}, 2));
    s.put("c", Tensor<std::uint8_t>(Shape{2, 2}, 7));
    s.put("d", Tensor<std::int32_t>(Shape{3}, -5));
    s.put_string("meta", "k=v\n");
    const auto bytes = s.serialize();
    const auto back = TensorStore::parse(bytes);
    CHECK(back.serialize() == bytes);
    CHECK(back.get<float>("a").values() == s.get<float>("a").values());
    CHECK(back.get<double>("b").values() == s.get<double>("b").values());
    CHECK(back.get<std::int32_t>("d").values() == std::vector<std::int32_t>(3, -5));
    CHECK(back.get_string("meta") == "k=v\n");
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FNGI");
}

TEST_CASE("corruption is detected by the checksum") {
    TensorStore s;
    s.put("x", random_tensor<double>({16}, 3));
    auto bytes = s.serialize();
    bytes[bytes.size() - 10] ^= 0x40;
    CHECK_THROWS_AS(TensorStore::parse(bytes), DataError);
    auto truncated = s.serialize();
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_AS(TensorStore::parse(truncated), DataError);
    std::vector<std::uint8_t> junk{'N', 'O', 'P', 'E', 0, 0, 0, 0, 0, 0, 0, 0};
    CHECK_THROWS_AS(TensorStore::parse(junk), DataError);
}

TEST_CASE("unknown dtypes are carried but not readable as a tensor") {
    TensorStore s;
    s.put_section(StoreSection{"odd", 99, Shape{2}, {1, 2, 3, 4}});
    const auto back = TensorStore::parse(s.serialize());
    CHECK(back.section("odd").dtype == 99);
    CHECK(back.section("odd").payload == std::vector<std::uint8_t>{1, 2, 3, 4});
    CHECK_THROWS_AS(back.get<float>("odd"), DataError);
    CHECK_THROWS_AS(back.get<float>("missing"), DataError);
}

TEST_CASE("type mismatch is a data error") {
    TensorStore s;
    s.put("x", random_tensor<double>({2}, 4));
    CHECK_THROWS_AS(s.get<float>("x"), DataError);
}

TEST_CASE("feature banks round-trip through a file") {
    const auto b = sample_bank();
    const auto path = tmp("bank.fngi");
    save_bank(path, b);
    const auto back = load_bank(path);
    CHECK(back.ids == b.ids);
    CHECK(back.labels == b.labels);
    CHECK(back.objectives == b.objectives);
    CHECK(back.config_hash == b.config_hash);
    CHECK(back.projection_seeds == b.projection_seeds);
    CHECK(back.config_echo == b.config_echo);
    CHECK(back.fused.values() == b.fused.values());
    CHECK(back.embeddings.values() == b.embeddings.values());
    CHECK(back.gradients[1].values() == b.gradients[1].values());
    // Re-saving gives the same bytes.
    const auto path2 = tmp("bank2.fngi");
    save_bank(path2, back);
    CHECK(read_text_file(path) == read_text_file(path2));
    CHECK_THROWS_AS(load_bank(tmp("absent.fngi")), DataError);
}

TEST_CASE("PCA models round-trip") {
    PcaModel m;
    m.mean = {1, 2, 3};
    m.components = random_tensor({2, 3}, 5);
    m.explained_variance = {4, 1};
    TensorStore s;
    put_pca(s, m);
    const auto back = get_pca(TensorStore::parse(s.serialize()));
    CHECK(back.mean == m.mean);
    CHECK(back.components.values() == m.components.values());
    CHECK(back.explained_variance == m.explained_variance);
}

TEST_CASE("meta encoding is sorted and invertible") {
    const std::map<std::string, std::string> kv{{"b", "2"}, {"a", "x y"}};
    CHECK(encode_meta(kv) == "a=x y\nb=2\n");
    CHECK(decode_meta(encode_meta(kv)) == kv);
}
