#include "fungi/fungi.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "fungi/pipeline.hpp"
#include "fungi/rng.hpp"
#include "fungi/store.hpp"

struct fungi_config {
    fungi::RunConfig cfg;
};

struct fungi_bank {
    fungi::FeatureBank bank;
};

struct fungi_report {
    fungi::EvalReport report;
    mutable std::string csv, table;
};

namespace {

thread_local std::string g_last_error;

fungi_status fail(fungi_status s, const std::string& msg) {
    g_last_error = msg;
    return s;
}

template <typename F>
fungi_status guarded(F&& fn) {
    try {
        fn();
        g_last_error.clear();
        return FUNGI_OK;
    } catch (const fungi::Error& e) {
        return fail(static_cast<fungi_status>(e.code()), e.what());
    } catch (const std::bad_alloc&) {
        return fail(FUNGI_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(FUNGI_ERR_INTERNAL, e.what());
    }
}

void need(const void* p, const char* what) {
    if (!p) throw fungi::ConfigError(std::string(what) + " is null");
}

fungi_status copy_out(const std::string& s, char* buf, size_t size, size_t* needed) {
    if (needed) *needed = s.size() + 1;
    if (buf && size > 0) {
        const size_t n = std::min(size - 1, s.size());
        std::memcpy(buf, s.data(), n);
        buf[n] = '\0';
    }
    if (buf && size < s.size() + 1) return fail(FUNGI_ERR_CONFIG, "buffer too small");
    return FUNGI_OK;
}

fungi::LogFn wrap_log(fungi_log_fn log, void* user) {
    if (!log) return {};
    return [log, user](const std::string& m) { log(m.c_str(), user); };
}

std::filesystem::path split_path(const char* dir, const std::string& split) {
    return std::filesystem::path(dir) / (split + ".fngi");
}

template <typename F>
fungi_status make_report(fungi_report_t** out, F&& fn) {
    return guarded([&] {
        need(out, "output handle");
        auto r = std::make_unique<fungi_report>();
        r->report = fn();
        *out = r.release();
    });
}

}  // namespace

extern "C" {

const char* fungi_version(void) { return "0.1.0"; }

const char* fungi_last_error(void) { return g_last_error.c_str(); }

fungi_status fungi_config_default(fungi_config_t** out) {
    return guarded([&] {
        need(out, "output handle");
        *out = new fungi_config{};
    });
}

fungi_status fungi_config_load(const char* path, fungi_config_t** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "output handle");
        *out = new fungi_config{fungi::RunConfig::load(path)};
    });
}

fungi_status fungi_config_parse(const char* text, fungi_config_t** out) {
    return guarded([&] {
        need(text, "text");
        need(out, "output handle");
        *out = new fungi_config{fungi::RunConfig::parse(text)};
    });
}

fungi_status fungi_config_set(fungi_config_t* config, const char* section, const char* key, const char* value) {
    return guarded([&] {
        need(config, "config");
        need(section, "section");
        need(key, "key");
        need(value, "value");
        fungi::RunConfig next = config->cfg;
        next.set(section, key, value);
        config->cfg = std::move(next);
    });
}

fungi_status fungi_config_get(const fungi_config_t* config, const char* section, const char* key, char* buf, size_t size,
                              size_t* needed) {
    std::string v;
    const fungi_status s = guarded([&] {
        need(config, "config");
        need(section, "section");
        need(key, "key");
        v = config->cfg.get(section, key);
    });
    return s == FUNGI_OK ? copy_out(v, buf, size, needed) : s;
}

fungi_status fungi_config_text(const fungi_config_t* config, char* buf, size_t size, size_t* needed) {
    std::string v;
    const fungi_status s = guarded([&] {
        need(config, "config");
        v = config->cfg.to_ini();
    });
    return s == FUNGI_OK ? copy_out(v, buf, size, needed) : s;
}

fungi_status fungi_config_write(const fungi_config_t* config, const char* path) {
    return guarded([&] {
        need(config, "config");
        need(path, "path");
        fungi::write_file_atomic(path, config->cfg.to_ini());
    });
}

fungi_status fungi_config_hash(const fungi_config_t* config, uint64_t* out) {
    return guarded([&] {
        need(config, "config");
        need(out, "output");
        *out = config->cfg.extraction_hash();
    });
}

void fungi_config_free(fungi_config_t* config) { delete config; }

fungi_status fungi_synth(const fungi_config_t* config, const char* dir) {
    return guarded([&] {
        need(config, "config");
        need(dir, "directory");
        const fungi::RunConfig& c = config->cfg;
        c.validate();
        fungi::SynthParams p;
        p.kind = c.synth_kind;
        p.classes = c.synth_classes;
        p.image_size = c.synth_image_size;
        p.noise = c.synth_noise;
        p.cell = std::max<std::size_t>(1, c.synth_image_size / c.encoder.grid());
        p.seed = fungi::derive_seed(c.seed, "synth");
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw fungi::DataError("cannot create '" + std::string(dir) + "': " + ec.message());
        p.n = c.synth_train;
        fungi::save_dataset(split_path(dir, "train"), fungi::synth_dataset(p, "train"));
        p.n = c.synth_test;
        fungi::save_dataset(split_path(dir, "test"), fungi::synth_dataset(p, "test"));
    });
}

fungi_status fungi_extract(const fungi_config_t* config, const char* data_dir, const char* split, size_t jobs,
                           fungi_log_fn log, void* log_user, fungi_bank_t** out) {
    return guarded([&] {
        need(config, "config");
        need(data_dir, "data directory");
        need(split, "split");
        need(out, "output handle");
        const fungi::Dataset data = fungi::load_dataset(split_path(data_dir, split));
        const fungi::Dataset negatives =
            std::string(split) == "train" ? data : fungi::load_dataset(split_path(data_dir, "train"));
        auto b = std::make_unique<fungi_bank>();
        b->bank = fungi::extract_features(config->cfg, data, negatives, jobs, wrap_log(log, log_user));
        *out = b.release();
    });
}

fungi_status fungi_bank_load(const char* path, fungi_bank_t** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "output handle");
        *out = new fungi_bank{fungi::load_bank(path)};
    });
}

fungi_status fungi_bank_save(const fungi_bank_t* bank, const char* path) {
    return guarded([&] {
        need(bank, "bank");
        need(path, "path");
        fungi::save_bank(path, bank->bank);
    });
}

size_t fungi_bank_size(const fungi_bank_t* bank) { return bank ? bank->bank.size() : 0; }

size_t fungi_bank_dim(const fungi_bank_t* bank) { return bank ? bank->bank.dim() : 0; }

uint64_t fungi_bank_config_hash(const fungi_bank_t* bank) { return bank ? bank->bank.config_hash : 0; }

fungi_status fungi_bank_row(const fungi_bank_t* bank, size_t i, double* out) {
    return guarded([&] {
        need(bank, "bank");
        need(out, "output");
        if (i >= bank->bank.size()) throw fungi::DataError("row " + std::to_string(i) + " out of range");
        const auto r = bank->bank.fused.row(i);
        std::copy(r.begin(), r.end(), out);
    });
}

fungi_status fungi_bank_config(const fungi_bank_t* bank, fungi_config_t** out) {
    return guarded([&] {
        need(bank, "bank");
        need(out, "output handle");
        *out = new fungi_config{fungi::RunConfig::parse(bank->bank.config_echo)};
    });
}

void fungi_bank_free(fungi_bank_t* bank) { delete bank; }

fungi_status fungi_fuse_pca(fungi_bank_t* train, fungi_bank_t* test, size_t out_dim, const char* pca_path) {
    return guarded([&] {
        need(train, "train bank");
        need(test, "test bank");
        fungi::PcaOutput r = fungi::fuse_pca(train->bank, test->bank, out_dim);
        if (pca_path) {
            fungi::TensorStore s;
            fungi::put_pca(s, r.model);
            s.save(pca_path);
        }
        train->bank = std::move(r.train);
        test->bank = std::move(r.test);
    });
}

fungi_status fungi_eval(const fungi_config_t* config, const fungi_bank_t* train, const fungi_bank_t* test, size_t jobs,
                        fungi_report_t** out) {
    return make_report(out, [&] {
        need(config, "config");
        need(train, "train bank");
        need(test, "test bank");
        return fungi::eval_knn(config->cfg, train->bank, test->bank, jobs);
    });
}

fungi_status fungi_cluster(const fungi_config_t* config, const fungi_bank_t* bank, fungi_report_t** out) {
    return make_report(out, [&] {
        need(config, "config");
        need(bank, "bank");
        return fungi::eval_cluster(config->cfg, bank->bank);
    });
}

fungi_status fungi_probe(const fungi_config_t* config, const fungi_bank_t* train, const fungi_bank_t* test,
                         fungi_report_t** out) {
    return make_report(out, [&] {
        need(config, "config");
        need(train, "train bank");
        need(test, "test bank");
        return fungi::eval_probe(config->cfg, train->bank, test->bank);
    });
}

fungi_status fungi_retrieve(const fungi_config_t* config, const fungi_bank_t* train, const fungi_bank_t* test,
                            fungi_report_t** out) {
    return make_report(out, [&] {
        need(config, "config");
        need(train, "train bank");
        need(test, "test bank");
        return fungi::eval_retrieval(config->cfg, train->bank, test->bank);
    });
}

fungi_status fungi_cka(const fungi_config_t* config, const fungi_bank_t* bank, fungi_report_t** out) {
    return make_report(out, [&] {
        need(config, "config");
        need(bank, "bank");
        return fungi::eval_cka(config->cfg, bank->bank);
    });
}

fungi_status fungi_segment(const fungi_config_t* config, const char* data_dir, size_t jobs, fungi_log_fn log,
                           void* log_user, fungi_report_t** out) {
    return make_report(out, [&] {
        need(config, "config");
        need(data_dir, "data directory");
        const fungi::Dataset train = fungi::load_dataset(split_path(data_dir, "train"));
        const fungi::Dataset test = fungi::load_dataset(split_path(data_dir, "test"));
        return fungi::eval_segment(config->cfg, train, test, jobs, wrap_log(log, log_user));
    });
}

const char* fungi_report_csv(const fungi_report_t* report) {
    if (!report) return "";
    report->csv = report->report.to_csv();
    return report->csv.c_str();
}

const char* fungi_report_table(const fungi_report_t* report) {
    if (!report) return "";
    report->table = report->report.to_table();
    return report->table.c_str();
}

size_t fungi_report_rows(const fungi_report_t* report) { return report ? report->report.rows.size() : 0; }

fungi_status fungi_report_value(const fungi_report_t* report, const char* name, const char* metric, double* out) {
    return guarded([&] {
        need(report, "report");
        need(name, "name");
        need(metric, "metric");
        need(out, "output");
        for (const auto& r : report->report.rows) {
            if (r.name == name && r.metric == metric) {
                *out = r.value;
                return;
            }
        }
        throw fungi::DataError("report has no row " + std::string(name) + "/" + metric);
    });
}

fungi_status fungi_report_save(const fungi_report_t* report, const char* path) {
    return guarded([&] {
        need(report, "report");
        need(path, "path");
        fungi::write_file_atomic(path, report->report.to_csv());
        for (const auto& [suffix, body] : report->report.attachments) fungi::write_file_atomic(std::string(path) + suffix, body);
    });
}

void fungi_report_free(fungi_report_t* report) { delete report; }

}  // extern "C"
