#include "fungi/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>

#include "fungi/parallel.hpp"
#include "fungi/rng.hpp"
#include "fungi/segmem.hpp"

namespace fungi {

namespace {

Image at_encoder_size(const Image& image, const EncoderConfig& ec) {
    if (image.dim(1) == ec.image_size && image.dim(2) == ec.image_size) return image;
    return resize_bilinear(image, ec.image_size, ec.image_size);
}

std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void require_finite(std::span<const double> v, const std::string& what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError("non-finite value in " + what);
    }
}

Tensor<double> normalized_rows(const Tensor<double>& x) {
    Tensor<double> out = x;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        const double n = l2_norm(std::span<const double>(r));
        if (n > 0) {
            for (double& v : r) v /= n;
        }
    }
    return out;
}

Tensor<double> select_rows(const Tensor<double>& x, const std::vector<std::size_t>& idx) {
    Tensor<double> out(Shape{idx.size(), x.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(i).begin());
    return out;
}

// (name, matrix) for every bank segment: embedding, each gradient, fused.
std::vector<std::pair<std::string, Tensor<double>>> segments(const FeatureBank& bank) {
    std::vector<std::pair<std::string, Tensor<double>>> out;
    out.emplace_back("embedding", normalized_rows(bank.embeddings));
    for (std::size_t k = 0; k < bank.objectives.size(); ++k) {
        out.emplace_back("grad." + bank.objectives[k], normalized_rows(bank.gradients.at(k)));
    }
    out.emplace_back("fungi", bank.fused);
    return out;
}

std::size_t class_count(const std::vector<Label>& labels) { return std::set<Label>(labels.begin(), labels.end()).size(); }

EvalReport base_report(const RunConfig& config, const std::vector<const FeatureBank*>& banks) {
    EvalReport r;
    r.echo = config_echo(config);
    for (const FeatureBank* b : banks) {
        r.echo.emplace_back("bank." + b->split + ".config_hash", hex64(b->config_hash));
        r.echo.emplace_back("bank." + b->split + ".size", std::to_string(b->size()));
        r.echo.emplace_back("bank." + b->split + ".pca_dim", std::to_string(b->pca_dim));
        for (std::size_t k = 0; k < b->projection_seeds.size(); ++k) {
            r.echo.emplace_back("bank." + b->split + ".projection_seed." + b->objectives[k], std::to_string(b->projection_seeds[k]));
        }
    }
    return r;
}

void check_against_config(const RunConfig& config, const FeatureBank& bank) {
    if (bank.config_hash != config.extraction_hash()) {
        throw ConfigError("bank '" + bank.split + "' was extracted with config hash " + hex64(bank.config_hash) +
                          ", the run config hashes to " + hex64(config.extraction_hash()));
    }
}

// Adds deltas against the row named `baseline` sharing each row's metric.
void add_deltas(EvalReport& r, const std::string& baseline) {
    for (auto& row : r.rows) {
        if (row.name == baseline) continue;
        for (const auto& b : r.rows) {
            if (b.name == baseline && b.metric == row.metric) row.delta = row.value - b.value;
        }
    }
}

std::unique_ptr<LatentIndex> make_seg_index(const RunConfig& config, const PatchMemoryBank& bank, std::uint64_t seed,
                                            std::size_t k, EvalReport* report) {
    if (config.seg_index == "exact") return std::make_unique<ExactIndex>(bank.features, bank.images);
    IvfParams p = config.seg_setup().ivf;
    const std::size_t n = bank.size();
    if (p.num_leaves > n) {
        p.num_leaves = n;
        if (report) report->echo.emplace_back("segmentation.num_leaves_effective", std::to_string(n));
    }
    p.leaves_to_search = std::min(p.leaves_to_search, p.num_leaves);
    p.rerank = std::max(p.rerank, k);
    return std::make_unique<IvfIndex>(bank.features, p, seed, bank.images);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_echo(const RunConfig& config) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(config.to_ini());
    std::string line, section;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (line[0] == '[') {
            section = line.substr(1, line.find(']') - 1);
            continue;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        out.emplace_back(section + "." + line.substr(0, eq), line.substr(eq + 3));
    }
    out.emplace_back("extraction_hash", hex64(config.extraction_hash()));
    return out;
}

ExtractionModel build_extraction_model(const RunConfig& config, const Dataset& negative_source) {
    config.validate();
    ExtractionModel m;
    m.params = init_encoder<float>(config.encoder, derive_seed(config.seed, "encoder"));
    if (config.collapse_attention) collapse_attention_outputs(m.params);
    m.objectives = config.objectives;
    const std::size_t d = config.encoder.dim;
    const Tensor<float>& w = m.params.get(config.source.weight_name());
    const std::size_t flat = w.dim(0) * (w.dim(1) + 1);
    for (ObjectiveKind kind : config.objectives) {
        switch (kind) {
            case ObjectiveKind::kl:
                m.kl_head = attach_head<float>(d, config.kl.proj_dim, derive_seed(config.seed, "head.kl"), config.kl.normalize_input);
                break;
            case ObjectiveKind::dino:
                m.dino_student = attach_head<float>(d, config.dino.proj_dim, derive_seed(config.seed, "head.dino.student"),
                                                    config.dino.normalize_input);
                m.dino_teacher = config.dino.independent_heads
                                     ? attach_head<float>(d, config.dino.proj_dim, derive_seed(config.seed, "head.dino.teacher"),
                                                          config.dino.normalize_input)
                                     : m.dino_student;
                break;
            case ObjectiveKind::simclr:
                m.simclr_head = attach_head<float>(d, config.simclr.proj_dim, derive_seed(config.seed, "head.simclr"),
                                                   config.simclr.normalize_input);
                m.negatives = build_negative_bank(m.params, m.simclr_head, negative_source.images, config.simclr,
                                                  derive_seed(config.seed, "negatives"));
                m.negatives.validate(1e-5);
                break;
            default:
                throw ConfigError("objective '" + std::string(to_string(kind)) + "' cannot feed an image-level bank");
        }
        const std::uint64_t ps = derive_seed(config.seed, "projection." + std::string(to_string(kind)));
        m.projection_seeds.push_back(ps);
        m.projections.push_back(ProjectionMatrix(config.projection, d, flat, ps).materialize());
    }
    return m;
}

FeatureRecord extract_record(const ExtractionModel& model, const RunConfig& config, const Image& image, std::int64_t id,
                             Label label) {
    const EncoderConfig& ec = config.encoder;
    const Image x = at_encoder_size(image, ec);
    FeatureRecord rec;
    rec.id = id;
    rec.label = label;
    const Encoding<float> enc = encode(model.params, x);
    rec.embedding.assign(enc.embedding.values().begin(), enc.embedding.values().end());
    require_finite(rec.embedding, "embedding of sample " + std::to_string(id));

    for (std::size_t j = 0; j < model.objectives.size(); ++j) {
        const ObjectiveKind kind = model.objectives[j];
        const std::string name(to_string(kind));
        const std::uint64_t vseed = derive_seed(derive_seed(config.seed, "views." + name), static_cast<std::uint64_t>(id));
        ObjectiveFn<float> fn;
        if (kind == ObjectiveKind::kl) {
            fn = kl_objective(model.kl_head, x, config.kl);
        } else if (kind == ObjectiveKind::dino) {
            DinoViews dv = dino_crops(x, vseed, config.dino.crops);
            std::vector<Image> views = std::move(dv.global.views);
            const std::size_t g = views.size();
            for (auto& v : dv.local.views) views.push_back(std::move(v));
            fn = dino_objective(model.dino_student, model.dino_teacher, std::move(views), g, config.dino);
        } else {
            PatchifyParams pp = config.simclr.patchify;
            pp.out_size = ec.image_size;
            fn = simclr_objective(model.simclr_head, patchify_overlap(x, pp).views, model.negatives.latents, config.simclr);
        }
        const LayerGradient<float> grad = loss_gradient(model.params, config.source, fn);
        const std::vector<double> flat = flatten_gradient(grad);
        require_finite(flat, name + " gradient of sample " + std::to_string(id));
        rec.gradients.push_back(project(model.projections[j], flat));
    }
    std::vector<std::span<const double>> segs;
    for (const auto& g : rec.gradients) segs.emplace_back(g);
    segs.emplace_back(rec.embedding);
    rec.fused = fuse(segs);
    return rec;
}

FeatureBank extract_features(const RunConfig& config, const Dataset& data, const Dataset& negative_source,
                             std::size_t jobs, const LogFn& log) {
    data.validate();
    if (data.size() == 0) throw DataError("dataset is empty");
    const auto t0 = std::chrono::steady_clock::now();
    const ExtractionModel model = build_extraction_model(config, negative_source);

    FeatureBank bank;
    bank.split = data.split;
    bank.config_hash = config.extraction_hash();
    for (ObjectiveKind k : config.objectives) bank.objectives.emplace_back(to_string(k));
    const std::string wn = config.source.weight_name();
    bank.gradient_source = wn.substr(0, wn.size() - std::string(".weight").size());
    bank.projection_kind = std::string(to_string(config.projection));
    bank.projection_seeds = model.projection_seeds;
    bank.config_echo = config.to_ini();

    std::vector<FeatureRecord> records(data.size());
    const std::size_t step = std::max<std::size_t>(1, data.size() / 10);
    std::size_t done = 0;
    std::mutex mu;
    parallel_for(data.size(), jobs, [&](std::size_t i) {
        records[i] = extract_record(model, config, data.images[i], static_cast<std::int64_t>(i), data.labels[i]);
        if (log) {
            std::lock_guard<std::mutex> lock(mu);
            if (++done % step == 0 || done == data.size()) {
                log("extract " + data.split + ": " + std::to_string(done) + "/" + std::to_string(data.size()));
            }
        }
    });
    for (const auto& r : records) bank.append(r);
    bank.validate();

    if (log) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[160];
        std::snprintf(buf, sizeof buf, "extract %s: %zu samples in %.2f s (%.2f samples/s, jobs=%zu)", data.split.c_str(),
                      data.size(), s, static_cast<double>(data.size()) / std::max(s, 1e-9), jobs);
        log(buf);
    }
    return bank;
}

void check_compatible(const FeatureBank& a, const FeatureBank& b) {
    if (a.config_hash != b.config_hash) {
        throw DataError("banks '" + a.split + "' and '" + b.split + "' have different config hashes (" + hex64(a.config_hash) +
                        " vs " + hex64(b.config_hash) + ")");
    }
    if (a.objectives != b.objectives || a.pca_dim != b.pca_dim || a.dim() != b.dim()) {
        throw DataError("banks '" + a.split + "' and '" + b.split + "' have different layouts");
    }
}

PcaOutput fuse_pca(const FeatureBank& train, const FeatureBank& test, std::size_t out_dim) {
    check_compatible(train, test);
    if (train.pca_dim != 0) throw DataError("banks are already PCA-reduced");
    if (out_dim == 0) throw ConfigError("PCA output dimension must be >= 1");
    PcaOutput out{train, test, fit_pca(train.fused, out_dim)};
    out.train.fused = apply_pca(out.model, train.fused);
    out.test.fused = apply_pca(out.model, test.fused);
    out.train.pca_dim = out.test.pca_dim = out_dim;
    return out;
}

EvalReport eval_knn(const RunConfig& config, const FeatureBank& train, const FeatureBank& test, std::size_t jobs) {
    check_compatible(train, test);
    check_against_config(config, train);
    EvalReport r = base_report(config, {&train, &test});
    std::vector<std::size_t> subset(train.size());
    std::iota(subset.begin(), subset.end(), std::size_t{0});
    std::string suffix;
    if (config.few_shot) {
        subset = few_shot_subset(train.labels, config.shots, derive_seed(config.seed, "few_shot"));
        suffix = "@" + std::to_string(config.shots) + "shot";
        std::string ids;
        for (std::size_t i : subset) ids += (ids.empty() ? "" : " ") + std::to_string(train.ids[i]);
        r.echo.emplace_back("few_shot.train_ids", ids);
    }
    std::vector<Label> train_labels;
    for (std::size_t i : subset) train_labels.push_back(train.labels[i]);
    const std::string metric = config.accuracy_mode == AccuracyMode::top1 ? "knn_top1" : "knn_mean_per_class";

    const auto tr = segments(train), te = segments(test);
    std::map<Label, double> per_embedding, per_fused;
    for (std::size_t s = 0; s < tr.size(); ++s) {
        const KnnIndex index(select_rows(tr[s].second, subset), train_labels, config.knn_k);
        const std::vector<Label> preds = knn_classify(index, te[s].second, jobs);
        r.rows.push_back({tr[s].first + suffix, metric, accuracy(preds, test.labels, config.accuracy_mode), std::nullopt});
        if (tr[s].first == "embedding") per_embedding = per_class_accuracy(preds, test.labels);
        if (tr[s].first == "fungi") per_fused = per_class_accuracy(preds, test.labels);
    }
    add_deltas(r, "embedding" + suffix);
    r.attachments.emplace_back(".per_class.csv", deltas_csv(per_class_delta(per_fused, per_embedding)));
    return r;
}

EvalReport eval_cluster(const RunConfig& config, const FeatureBank& bank) {
    check_against_config(config, bank);
    EvalReport r = base_report(config, {&bank});
    const std::size_t clusters = config.clusters ? config.clusters : class_count(bank.labels);
    r.echo.emplace_back("cluster.clusters_effective", std::to_string(clusters));
    for (const auto& [name, x] : segments(bank)) {
        if (name.rfind("grad.", 0) == 0) continue;
        const KMeansResult km = kmeans(x, clusters, derive_seed(config.seed, "kmeans"), config.kmeans);
        r.rows.push_back({name, "cluster_overlap", cluster_overlap(km.assignments, bank.labels), std::nullopt});
    }
    add_deltas(r, "embedding");
    return r;
}

EvalReport eval_probe(const RunConfig& config, const FeatureBank& train, const FeatureBank& test) {
    check_compatible(train, test);
    check_against_config(config, train);
    EvalReport r = base_report(config, {&train, &test});
    ProbeParams pp = config.probe;
    pp.seed = derive_seed(config.seed, "probe");
    const auto tr = segments(train), te = segments(test);
    for (std::size_t s = 0; s < tr.size(); ++s) {
        if (tr[s].first.rfind("grad.", 0) == 0) continue;
        const ProbeResult pr = logistic_probe(tr[s].second, train.labels, te[s].second, test.labels, pp);
        r.rows.push_back({tr[s].first, "probe_top1", pr.test_accuracy, std::nullopt});
        r.rows.push_back({tr[s].first, "probe_lambda", pr.best_lambda, std::nullopt});
    }
    add_deltas(r, "embedding");
    for (auto& row : r.rows) {
        if (row.metric == "probe_lambda") row.delta.reset();
    }
    return r;
}

EvalReport eval_retrieval(const RunConfig& config, const FeatureBank& train, const FeatureBank& test) {
    check_compatible(train, test);
    check_against_config(config, train);
    EvalReport r = base_report(config, {&train, &test});
    std::vector<std::vector<std::size_t>> relevance(test.size());
    for (std::size_t q = 0; q < test.size(); ++q) {
        for (std::size_t g = 0; g < train.size(); ++g) {
            if (train.labels[g] == test.labels[q]) relevance[q].push_back(g);
        }
    }
    const auto tr = segments(train), te = segments(test);
    for (std::size_t s = 0; s < tr.size(); ++s) {
        if (tr[s].first.rfind("grad.", 0) == 0) continue;
        const RetrievalResult rr = retrieval_map(te[s].second, tr[s].second, relevance);
        r.rows.push_back({tr[s].first, "map", rr.map, std::nullopt});
        if (s == 0) r.echo.emplace_back("retrieval.skipped_queries", std::to_string(rr.skipped));
    }
    add_deltas(r, "embedding");
    return r;
}

EvalReport eval_cka(const RunConfig& config, const FeatureBank& bank) {
    check_against_config(config, bank);
    EvalReport r = base_report(config, {&bank});
    const auto segs = segments(bank);
    std::ostringstream csv;
    csv << "segment";
    for (const auto& s : segs) csv << ',' << s.first;
    csv << '\n';
    for (std::size_t a = 0; a < segs.size(); ++a) {
        csv << segs[a].first;
        for (std::size_t b = 0; b < segs.size(); ++b) {
            const double v = linear_cka(segs[a].second, segs[b].second);
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6f", v);
            csv << ',' << buf;
            if (b > a) r.rows.push_back({segs[a].first + "~" + segs[b].first, "linear_cka", v, std::nullopt});
        }
        csv << '\n';
    }
    r.attachments.emplace_back(".cka.csv", csv.str());
    return r;
}

EvalReport eval_segment(const RunConfig& config, const Dataset& train, const Dataset& test, std::size_t jobs,
                        const LogFn& log) {
    config.validate();
    train.validate();
    test.validate();
    if (train.masks.empty() || test.masks.empty()) throw DataError("segmentation needs datasets with masks");
    if (train.num_classes != test.num_classes) throw DataError("train and test disagree on the class count");
    EvalReport r;
    r.echo = config_echo(config);

    EncoderParams<float> params = init_encoder<float>(config.encoder, derive_seed(config.seed, "encoder"));
    if (config.collapse_attention) collapse_attention_outputs(params);
    const Head<float> head = attach_head<float>(config.encoder.dim, config.seg_simclr.proj_dim,
                                                derive_seed(config.seed, "head.seg_simclr"), true);
    const Tensor<float> support_rows = support_latents(params, head, train.images);
    std::vector<std::int64_t> groups(support_rows.rows());
    const std::size_t tokens = config.encoder.num_patches();
    for (std::size_t i = 0; i < groups.size(); ++i) groups[i] = static_cast<std::int64_t>(i / tokens);
    const ExactIndex support(support_rows, groups);
    const SegModel model{&params, &head, &support};

    const EncoderConfig& ec = config.encoder;
    std::vector<Mask> gts;
    for (const auto& m : test.masks) gts.push_back(resize_nearest(m, ec.image_size, ec.image_size));

    std::vector<bool> variants{false};
    if (config.seg_fungi) variants.push_back(true);
    for (bool fungi : variants) {
        SegConfig sc = config.seg_config(train.num_classes);
        sc.fungi = fungi;
        const std::string name = fungi ? "fungi" : "embedding";
        const PatchMemoryBank bank = build_bank(model, train.images, train.masks, sc, derive_seed(config.seed, "seg.bank"), jobs);
        const auto index = make_seg_index(config, bank, derive_seed(config.seed, "seg.index"), sc.k, fungi ? nullptr : &r);
        std::vector<Mask> preds(test.size());
        const std::uint64_t qseed = derive_seed(config.seed, "seg.query");
        parallel_for(test.size(), jobs, [&](std::size_t i) {
            preds[i] = segment_image(model, *index, bank, test.images[i], sc, derive_seed(qseed, static_cast<std::uint64_t>(i)));
        });
        r.rows.push_back({name, "miou", miou(preds, gts, sc.num_classes, sc.ignore_label).mean, std::nullopt});
        if (log) log("segment " + name + ": bank of " + std::to_string(bank.size()) + " patches");
    }
    add_deltas(r, "embedding");

    // Memory bank built from the query images themselves, graded per patch cell.
    SegConfig self = config.seg_config(test.num_classes);
    self.fungi = false;
    self.k = 1;
    self.augmentation_epochs = 1;
    self.bank_size = 0;
    const PatchMemoryBank sbank = build_bank(model, test.images, test.masks, self, derive_seed(config.seed, "seg.self"), jobs);
    const ExactIndex sindex(sbank.features, sbank.images);
    const std::size_t g = ec.grid(), p = ec.patch_size;
    std::vector<Mask> grid_pred(test.size()), grid_gt(test.size());
    parallel_for(test.size(), jobs, [&](std::size_t i) {
        const Mask full = segment_image(model, sindex, sbank, test.images[i], self, 0);
        Mask gp(Shape{g, g});
        for (std::size_t y = 0; y < g; ++y) {
            for (std::size_t x = 0; x < g; ++x) gp[y * g + x] = full[(y * p) * ec.image_size + x * p];
        }
        grid_pred[i] = std::move(gp);
        grid_gt[i] = Mask(Shape{g, g}, patch_labels(gts[i], p, self.ignore_label));
    });
    r.rows.push_back({"self_bank_k1", "miou_grid", miou(grid_pred, grid_gt, self.num_classes, self.ignore_label).mean,
                      std::nullopt});
    return r;
}

}  // namespace fungi
