// fungi command-line front end over the C interface.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fungi/fungi.h"

namespace {

struct Failure {
    fungi_status status;
};

void check(fungi_status s) {
    if (s != FUNGI_OK) throw Failure{s};
}

void log_line(const char* msg, void*) { std::fprintf(stderr, "[fungi] %s\n", msg); }

void log_start(const std::string& cmd) {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    std::fprintf(stderr, "[fungi] %s start %s\n", buf, cmd.c_str());
}

template <typename T, void (*Free)(T*)>
struct Handle {
    T* p = nullptr;
    Handle() = default;
    Handle(const Handle&) = delete;
    Handle& operator=(const Handle&) = delete;
    ~Handle() { Free(p); }
    T** out() { return &p; }
    T* get() const { return p; }
};

using Config = Handle<fungi_config_t, fungi_config_free>;
using Bank = Handle<fungi_bank_t, fungi_bank_free>;
using Report = Handle<fungi_report_t, fungi_report_free>;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string out;
    std::vector<std::string> set;
};

void fail_config(const std::string& msg) {
    std::fprintf(stderr, "fungi: %s\n", msg.c_str());
    throw Failure{FUNGI_ERR_CONFIG};
}

void apply_overrides(fungi_config_t* cfg, const Common& c) {
    for (const auto& kv : c.set) {
        const auto dot = kv.find('.'), eq = kv.find('=');
        if (dot == std::string::npos || eq == std::string::npos || dot > eq) fail_config("--set expects section.key=value, got '" + kv + "'");
        check(fungi_config_set(cfg, kv.substr(0, dot).c_str(), kv.substr(dot + 1, eq - dot - 1).c_str(), kv.substr(eq + 1).c_str()));
    }
    if (c.seed) check(fungi_config_set(cfg, "run", "seed", std::to_string(*c.seed).c_str()));
}

// --config if given, otherwise the defaults; then --set and --seed.
void load_config(Config& cfg, const Common& c) {
    if (c.config.empty()) {
        check(fungi_config_default(cfg.out()));
    } else {
        check(fungi_config_load(c.config.c_str(), cfg.out()));
    }
    apply_overrides(cfg.get(), c);
}

// Bank commands default to the configuration the bank was extracted with.
void load_config_for(Config& cfg, const Common& c, const fungi_bank_t* bank) {
    if (c.config.empty()) {
        check(fungi_bank_config(bank, cfg.out()));
        apply_overrides(cfg.get(), c);
    } else {
        load_config(cfg, c);
    }
}

void emit(const Report& r, const Common& c) {
    std::fputs(fungi_report_table(r.get()), stdout);
    if (!c.out.empty()) check(fungi_report_save(r.get(), c.out.c_str()));
}

void add_common(CLI::App* sub, Common& c, bool out_required) {
    sub->add_option("--config", c.config, "Run configuration file");
    sub->add_option("--seed", c.seed, "Master seed (overrides [run] seed)");
    sub->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
    auto* o = sub->add_option("--out", c.out, "Output path");
    if (out_required) o->required();
    sub->add_option("--set", c.set, "Override one key: section.key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fungi: features from self-supervised loss gradients"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(fungi_version()));

    Common c;
    std::string data, split = "train", train, test, bank;
    std::optional<std::size_t> dim;
    std::string kind;
    std::optional<std::size_t> n, classes;

    auto* synth = app.add_subcommand("synth", "Write a seeded synthetic dataset (train.fngi, test.fngi) to --out DIR");
    add_common(synth, c, true);
    synth->add_option("--kind", kind, "blobs | stripes | segmentation");
    synth->add_option("--n", n, "Training samples");
    synth->add_option("--classes", classes, "Number of classes");

    auto* extract = app.add_subcommand("extract", "Extract a feature bank from DIR/<split>.fngi");
    add_common(extract, c, true);
    extract->add_option("--data", data, "Dataset directory")->required();
    extract->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}));

    auto* pca = app.add_subcommand("fuse-pca", "Fit PCA on the train bank, reduce both banks into --out DIR");
    add_common(pca, c, true);
    pca->add_option("--train", train, "Train bank")->required();
    pca->add_option("--test", test, "Test bank")->required();
    pca->add_option("--dim", dim, "Output dimension (default: from the config)");

    std::vector<CLI::App*> pair_cmds;
    for (auto [name, help] : {std::pair{"eval", "kNN accuracy of embedding, gradients and fused features"},
                              std::pair{"probe", "Logistic-regression probe"},
                              std::pair{"retrieve", "Retrieval mAP, test queries against the train gallery"}}) {
        auto* s = app.add_subcommand(name, help);
        add_common(s, c, false);
        s->add_option("--train", train, "Train bank")->required();
        s->add_option("--test", test, "Test bank")->required();
        pair_cmds.push_back(s);
    }
    std::vector<CLI::App*> single_cmds;
    for (auto [name, help] : {std::pair{"cluster", "k-means + Hungarian cluster overlap"},
                              std::pair{"cka", "Pairwise linear CKA between bank segments"}}) {
        auto* s = app.add_subcommand(name, help);
        add_common(s, c, false);
        s->add_option("--bank", bank, "Feature bank")->required();
        single_cmds.push_back(s);
    }
    auto* segment = app.add_subcommand("segment", "Retrieval segmentation: bank from DIR/train.fngi, mIoU on DIR/test.fngi");
    add_common(segment, c, false);
    segment->add_option("--data", data, "Segmentation dataset directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Error& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : FUNGI_ERR_CONFIG;
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    log_start(cmd);
    try {
        if (cmd == "synth") {
            Config cfg;
            load_config(cfg, c);
            if (!kind.empty()) check(fungi_config_set(cfg.get(), "synth", "kind", kind.c_str()));
            if (n) check(fungi_config_set(cfg.get(), "synth", "train", std::to_string(*n).c_str()));
            if (classes) check(fungi_config_set(cfg.get(), "synth", "classes", std::to_string(*classes).c_str()));
            check(fungi_synth(cfg.get(), c.out.c_str()));
        } else if (cmd == "extract") {
            Config cfg;
            load_config(cfg, c);
            Bank b;
            check(fungi_extract(cfg.get(), data.c_str(), split.c_str(), c.jobs, log_line, nullptr, b.out()));
            check(fungi_bank_save(b.get(), c.out.c_str()));
            std::printf("%s: %zu samples, fused dim %zu\n", c.out.c_str(), fungi_bank_size(b.get()), fungi_bank_dim(b.get()));
        } else if (cmd == "fuse-pca") {
            Bank tr, te;
            check(fungi_bank_load(train.c_str(), tr.out()));
            check(fungi_bank_load(test.c_str(), te.out()));
            Config cfg;
            load_config_for(cfg, c, tr.get());
            std::size_t d = 0;
            if (dim) {
                d = *dim;
            } else {
                char buf[64];
                std::string tag;
                check(fungi_config_get(cfg.get(), "pca", "dim", buf, sizeof buf, nullptr));
                d = std::stoull(buf);
                if (d == 0) {
                    check(fungi_config_get(cfg.get(), "pca", "backbone_tag", buf, sizeof buf, nullptr));
                    tag = buf;
                    check(fungi_config_get(cfg.get(), "pca", tag == "vit_b" ? "dim_vit_b" : "dim_vit_s", buf, sizeof buf, nullptr));
                    d = std::stoull(buf);
                }
            }
            const std::filesystem::path dir(c.out);
            std::error_code ec;
            std::filesystem::create_directories(dir, ec);
            if (ec) {
                std::fprintf(stderr, "fungi: cannot create %s: %s\n", c.out.c_str(), ec.message().c_str());
                return FUNGI_ERR_DATA;
            }
            check(fungi_fuse_pca(tr.get(), te.get(), d, (dir / "pca.fngi").string().c_str()));
            check(fungi_bank_save(tr.get(), (dir / "train.fngi").string().c_str()));
            check(fungi_bank_save(te.get(), (dir / "test.fngi").string().c_str()));
            std::printf("PCA to %zu dims written under %s\n", d, c.out.c_str());
        } else if (cmd == "eval" || cmd == "probe" || cmd == "retrieve") {
            Bank tr, te;
            check(fungi_bank_load(train.c_str(), tr.out()));
            check(fungi_bank_load(test.c_str(), te.out()));
            Config cfg;
            load_config_for(cfg, c, tr.get());
            Report r;
            if (cmd == "eval") check(fungi_eval(cfg.get(), tr.get(), te.get(), c.jobs, r.out()));
            if (cmd == "probe") check(fungi_probe(cfg.get(), tr.get(), te.get(), r.out()));
            if (cmd == "retrieve") check(fungi_retrieve(cfg.get(), tr.get(), te.get(), r.out()));
            emit(r, c);
        } else if (cmd == "cluster" || cmd == "cka") {
            Bank b;
            check(fungi_bank_load(bank.c_str(), b.out()));
            Config cfg;
            load_config_for(cfg, c, b.get());
            Report r;
            if (cmd == "cluster") check(fungi_cluster(cfg.get(), b.get(), r.out()));
            if (cmd == "cka") check(fungi_cka(cfg.get(), b.get(), r.out()));
            emit(r, c);
        } else if (cmd == "segment") {
            Config cfg;
            load_config(cfg, c);
            Report r;
            check(fungi_segment(cfg.get(), data.c_str(), c.jobs, log_line, nullptr, r.out()));
            emit(r, c);
        }
    } catch (const Failure& f) {
        const char* msg = fungi_last_error();
        if (msg && *msg) std::fprintf(stderr, "fungi: %s\n", msg);
        return static_cast<int>(f.status);
    }
    return 0;
}
