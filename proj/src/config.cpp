#include "fungi/config.hpp"

#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "fungi/store.hpp"

namespace fungi {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
    throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + " (expected " + std::string(want) + ")");
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
    return out;
}

double parse_double(std::string_view key, std::string_view v) {
    double out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a number");
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true") return true;
    if (v == "false") return false;
    bad_value(key, v, "true or false");
}

struct Field {
    std::string section;
    std::string key;
    std::function<std::string()> get;
    std::function<void(std::string_view)> set;
    std::string comment;  // emitted after the key line when non-empty
};

class Registry {
public:
    explicit Registry(std::vector<Field>& out) : out_(out) {}

    void section(std::string name) { section_ = std::move(name); }

    void size(const std::string& key, std::size_t& ref) {
        add(key, [&ref] { return std::to_string(ref); },
            [&ref, key](std::string_view v) { ref = static_cast<std::size_t>(parse_u64(key, v)); });
    }
    void u64(const std::string& key, std::uint64_t& ref) {
        add(key, [&ref] { return std::to_string(ref); }, [&ref, key](std::string_view v) { ref = parse_u64(key, v); });
    }
    void real(const std::string& key, double& ref) {
        add(key, [&ref] { return fmt_double(ref); }, [&ref, key](std::string_view v) { ref = parse_double(key, v); });
    }
    void flag(const std::string& key, bool& ref) {
        add(key, [&ref] { return std::string(ref ? "true" : "false"); },
            [&ref, key](std::string_view v) { ref = parse_bool(key, v); });
    }
    void text(const std::string& key, std::string& ref) {
        add(key, [&ref] { return ref; }, [&ref](std::string_view v) { ref = std::string(v); });
    }
    void custom(const std::string& key, std::function<std::string()> get, std::function<void(std::string_view)> set) {
        add(key, std::move(get), std::move(set));
    }
    void note(std::function<std::string()> fn) { notes_.emplace_back(out_.size() - 1, std::move(fn)); }

    std::vector<std::pair<std::size_t, std::function<std::string()>>> notes_;

private:
    void add(const std::string& key, std::function<std::string()> get, std::function<void(std::string_view)> set) {
        out_.push_back(Field{section_, key, std::move(get), std::move(set), {}});
    }
    std::vector<Field>& out_;
    std::string section_;
};

std::string join_objectives(const std::vector<ObjectiveKind>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::string(to_string(v[i]));
    return out;
}

struct Schema {
    std::vector<Field> fields;
    std::vector<std::pair<std::size_t, std::function<std::string()>>> notes;
};

Schema schema(RunConfig& c) {
    Schema s;
    Registry r(s.fields);
    r.section("run");
    r.u64("seed", c.seed);

    r.section("backbone");
    r.size("image_size", c.encoder.image_size);
    r.size("patch_size", c.encoder.patch_size);
    r.size("depth", c.encoder.depth);
    r.size("dim", c.encoder.dim);
    r.size("heads", c.encoder.heads);
    r.size("mlp_ratio", c.encoder.mlp_ratio);
    r.size("channels", c.encoder.channels);
    r.custom("pooling", [&c] { return std::string(to_string(c.encoder.pooling)); },
             [&c](std::string_view v) { c.encoder.pooling = parse_pooling(v); });
    r.flag("collapse_attention", c.collapse_attention);

    r.section("gradient");
    r.size("block", c.source.block_index);
    r.custom("layer", [&c] { return std::string(to_string(c.source.kind)); },
             [&c](std::string_view v) { c.source.kind = parse_layer_kind(v); });

    r.section("objectives");
    r.custom("set", [&c] { return join_objectives(c.objectives); },
             [&c](std::string_view v) {
                 std::vector<ObjectiveKind> out;
                 std::size_t pos = 0;
                 while (pos <= v.size()) {
                     const std::size_t e = std::min(v.find(',', pos), v.size());
                     const std::string item = trim(v.substr(pos, e - pos));
                     if (!item.empty()) {
                         const ObjectiveKind k = parse_objective(item);
                         if (k == ObjectiveKind::simclr_patch) throw ConfigError("simclr_patch is a segmentation objective");
                         out.push_back(k);
                     }
                     pos = e + 1;
                 }
                 c.objectives = std::move(out);
             });

    r.section("kl");
    r.real("tau", c.kl.tau);
    r.size("proj_dim", c.kl.proj_dim);
    r.flag("normalize_input", c.kl.normalize_input);
    r.custom("direction",
             [&c] { return std::string(c.kl.direction == KlDirection::uniform_to_model ? "uniform_to_model" : "model_to_uniform"); },
             [&c](std::string_view v) {
                 if (v == "uniform_to_model") c.kl.direction = KlDirection::uniform_to_model;
                 else if (v == "model_to_uniform") c.kl.direction = KlDirection::model_to_uniform;
                 else bad_value("direction", v, "uniform_to_model or model_to_uniform");
             });

    r.section("dino");
    r.real("tau_student", c.dino.tau_student);
    r.real("tau_teacher", c.dino.tau_teacher);
    r.size("proj_dim", c.dino.proj_dim);
    r.flag("normalize_input", c.dino.normalize_input);
    r.flag("independent_heads", c.dino.independent_heads);
    r.size("global_crops", c.dino.crops.global_count);
    r.real("global_scale_min", c.dino.crops.global_scale.first);
    r.real("global_scale_max", c.dino.crops.global_scale.second);
    r.size("local_crops", c.dino.crops.local_count);
    r.real("local_scale_min", c.dino.crops.local_scale.first);
    r.real("local_scale_max", c.dino.crops.local_scale.second);
    r.size("crop_size", c.dino.crops.out_size);

    r.section("simclr");
    r.real("tau", c.simclr.tau);
    r.size("proj_dim", c.simclr.proj_dim);
    r.flag("normalize_input", c.simclr.normalize_input);
    r.size("negative_images", c.simclr.negative_images);
    r.size("patch_base", c.simclr.patchify.base);
    r.size("patch_size", c.simclr.patchify.patch);
    r.size("patch_grid", c.simclr.patchify.grid);
    r.note([&c] {
        const std::size_t views = c.simclr.patchify.grid * c.simclr.patchify.grid;
        return "# derived: positives = " + std::to_string(views) + ", negatives = " + std::to_string(views) + " x " +
               std::to_string(c.simclr.negative_images) + " = " + std::to_string(views * c.simclr.negative_images);
    });

    r.section("projection");
    r.custom("kind", [&c] { return std::string(to_string(c.projection)); },
             [&c](std::string_view v) { c.projection = parse_projection_kind(v); });

    r.section("pca");
    r.text("backbone_tag", c.backbone_tag);
    r.size("dim_vit_s", c.pca_dim_vit_s);
    r.size("dim_vit_b", c.pca_dim_vit_b);
    r.size("dim", c.pca_dim);

    r.section("eval");
    r.size("knn_k", c.knn_k);
    r.size("shots", c.shots);
    r.flag("few_shot", c.few_shot);
    r.custom("accuracy", [&c] { return std::string(c.accuracy_mode == AccuracyMode::top1 ? "top1" : "mean_per_class"); },
             [&c](std::string_view v) {
                 if (v == "top1") c.accuracy_mode = AccuracyMode::top1;
                 else if (v == "mean_per_class") c.accuracy_mode = AccuracyMode::mean_per_class;
                 else bad_value("accuracy", v, "top1 or mean_per_class");
             });

    r.section("cluster");
    r.size("clusters", c.clusters);
    r.size("max_iter", c.kmeans.max_iter);
    r.real("tol", c.kmeans.tol);

    r.section("probe");
    r.real("lambda_min", c.probe.lambda_min);
    r.real("lambda_max", c.probe.lambda_max);
    r.size("lambda_count", c.probe.lambda_count);
    r.size("max_epochs", c.probe.max_epochs);
    r.real("val_fraction", c.probe.val_fraction);

    r.section("segmentation");
    r.text("mode", c.seg_mode);
    r.text("index", c.seg_index);
    r.flag("fungi", c.seg_fungi);
    r.custom("ignore_label", [&c] { return std::to_string(c.ignore_label); },
             [&c](std::string_view v) {
                 const auto x = parse_u64("ignore_label", v);
                 if (x > 255) bad_value("ignore_label", v, "0..255");
                 c.ignore_label = static_cast<std::uint8_t>(x);
             });
    r.size("dims_per_block", c.seg_dims_per_block);
    r.custom("anisotropic_threshold", [&c] { return fmt_double(c.seg_full.ivf.anisotropic_threshold); },
             [&c](std::string_view v) {
                 c.seg_full.ivf.anisotropic_threshold = c.seg_few_shot.ivf.anisotropic_threshold = parse_double("anisotropic_threshold", v);
             });
    for (auto* setup : {&c.seg_full, &c.seg_few_shot}) {
        const std::string p = setup == &c.seg_full ? "full_" : "few_shot_";
        r.size(p + "k", setup->k);
        r.real(p + "tau", setup->tau);
        r.size(p + "augmentation_epochs", setup->augmentation_epochs);
        r.size(p + "bank_size", setup->bank_size);
        r.size(p + "num_leaves", setup->ivf.num_leaves);
        r.size(p + "leaves_to_search", setup->ivf.leaves_to_search);
        r.size(p + "rerank", setup->ivf.rerank);
    }
    r.size("simclr_proj_dim", c.seg_simclr.proj_dim);
    r.real("simclr_tau", c.seg_simclr.tau);
    r.size("retrieved_negatives", c.seg_simclr.retrieved_negatives);
    r.size("kept_negatives", c.seg_simclr.kept_negatives);
    r.real("jitter_brightness", c.seg_jitter.brightness);
    r.real("jitter_contrast", c.seg_jitter.contrast);
    r.real("jitter_saturation", c.seg_jitter.saturation);
    r.real("jitter_hue", c.seg_jitter.hue);
    r.real("jitter_p", c.seg_jitter.p);
    r.real("scale_min", c.seg_scale.first);
    r.real("scale_max", c.seg_scale.second);

    r.section("synth");
    r.text("kind", c.synth_kind);
    r.size("classes", c.synth_classes);
    r.size("train", c.synth_train);
    r.size("test", c.synth_test);
    r.size("image_size", c.synth_image_size);
    r.real("noise", c.synth_noise);

    s.notes = std::move(r.notes_);
    return s;
}

const std::set<std::string> kExtractionSections = {"run", "backbone", "gradient", "objectives", "kl", "dino", "simclr", "projection"};

}  // namespace

RunConfig::RunConfig() {
    seg_few_shot.k = 90;
    seg_few_shot.tau = 0.1;
    seg_few_shot.augmentation_epochs = 8;
    seg_few_shot.bank_size = 2048 * 10000;
    seg_few_shot.ivf.leaves_to_search = 256;
    seg_few_shot.ivf.rerank = 1800;
}

void RunConfig::validate() const {
    encoder.validate();
    source.validate(encoder);
    if (objectives.empty()) throw ConfigError("objective set is empty");
    std::set<ObjectiveKind> uniq(objectives.begin(), objectives.end());
    if (uniq.size() != objectives.size()) throw ConfigError("objective listed twice");
    auto positive = [](double v, const char* what) {
        if (!(v > 0)) throw ConfigError(std::string(what) + " must be > 0");
    };
    positive(kl.tau, "kl.tau");
    positive(dino.tau_student, "dino.tau_student");
    positive(dino.tau_teacher, "dino.tau_teacher");
    positive(simclr.tau, "simclr.tau");
    positive(seg_simclr.tau, "segmentation.simclr_tau");
    for (auto d : {kl.proj_dim, dino.proj_dim, simclr.proj_dim, seg_simclr.proj_dim}) {
        if (d == 0) throw ConfigError("projection head dimensions must be >= 1");
    }
    if (dino.crops.global_count < 2) throw ConfigError("dino needs at least 2 global crops");
    if (dino.crops.out_size != encoder.image_size) {
        throw ConfigError("dino.crop_size (" + std::to_string(dino.crops.out_size) + ") must equal backbone.image_size (" +
                          std::to_string(encoder.image_size) + ")");
    }
    if (simclr.patchify.grid == 0 || simclr.patchify.patch > simclr.patchify.base) throw ConfigError("simclr patchify parameters");
    if (simclr.patchify.grid * simclr.patchify.grid < 2) throw ConfigError("simclr needs at least two positive views");
    if (knn_k == 0) throw ConfigError("eval.knn_k must be >= 1");
    if (shots == 0) throw ConfigError("eval.shots must be >= 1");
    if (backbone_tag != "vit_s" && backbone_tag != "vit_b") throw ConfigError("pca.backbone_tag must be vit_s or vit_b");
    if (seg_mode != "full" && seg_mode != "few_shot") throw ConfigError("segmentation.mode must be full or few_shot");
    if (seg_index != "ivf" && seg_index != "exact") throw ConfigError("segmentation.index must be ivf or exact");
    seg_full.ivf.validate();
    seg_few_shot.ivf.validate();
    if (synth_kind != "blobs" && synth_kind != "stripes" && synth_kind != "segmentation") {
        throw ConfigError("synth.kind must be blobs, stripes or segmentation");
    }
    if (synth_classes < 2) throw ConfigError("synth.classes must be >= 2");
}

std::size_t RunConfig::resolved_pca_dim() const {
    if (pca_dim) return pca_dim;
    return backbone_tag == "vit_b" ? pca_dim_vit_b : pca_dim_vit_s;
}

SegConfig RunConfig::seg_config(std::size_t num_classes) const {
    const SegSetup& s = seg_setup();
    SegConfig c;
    c.k = s.k;
    c.tau = s.tau;
    c.augmentation_epochs = s.augmentation_epochs;
    c.bank_size = s.bank_size;
    c.fungi = seg_fungi;
    c.num_classes = num_classes;
    c.ignore_label = ignore_label;
    c.simclr = seg_simclr;
    c.jitter = seg_jitter;
    c.scale_range = seg_scale;
    return c;
}

std::string RunConfig::to_ini() const {
    RunConfig copy = *this;
    const Schema s = schema(copy);
    std::ostringstream os;
    std::string current;
    for (std::size_t i = 0; i < s.fields.size(); ++i) {
        const Field& f = s.fields[i];
        if (f.section != current) {
            if (!current.empty()) os << '\n';
            os << '[' << f.section << "]\n";
            current = f.section;
        }
        os << f.key << " = " << f.get() << '\n';
        for (const auto& [idx, fn] : s.notes) {
            if (idx == i) os << fn() << '\n';
        }
    }
    return os.str();
}

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig c;
    std::string section;
    std::size_t pos = 0, line_no = 0;
    std::set<std::pair<std::string, std::string>> seen;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const std::string line = trim(text.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        if (!seen.emplace(section, key).second) {
            throw ConfigError("line " + std::to_string(line_no) + ": duplicate key " + section + "." + key);
        }
        try {
            c.set(section, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    return parse(text);
}

void RunConfig::set(std::string_view section, std::string_view key, std::string_view value) {
    Schema s = schema(*this);
    for (auto& f : s.fields) {
        if (f.section == section && f.key == key) {
            try {
                f.set(value);
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                throw ConfigError(e.what());
            }
            return;
        }
    }
    throw ConfigError("unknown key " + std::string(section) + "." + std::string(key));
}

std::string RunConfig::get(std::string_view section, std::string_view key) const {
    RunConfig copy = *this;
    const Schema s = schema(copy);
    for (const auto& f : s.fields) {
        if (f.section == section && f.key == key) return f.get();
    }
    throw ConfigError("unknown key " + std::string(section) + "." + std::string(key));
}

std::uint64_t RunConfig::extraction_hash() const {
    RunConfig copy = *this;
    const Schema s = schema(copy);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::string_view str) {
        for (unsigned char ch : str) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& f : s.fields) {
        if (!kExtractionSections.count(f.section)) continue;
        feed(f.section);
        feed(".");
        feed(f.key);
        feed("=");
        feed(f.get());
        feed("\n");
    }
    return h;
}

}  // namespace fungi
