#include "fungi/store.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <type_traits>

namespace fungi {

std::size_t dtype_size(DType t) {
    switch (t) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
        case DType::i32: return 4;
    }
    throw DataError("unknown dtype tag " + std::to_string(static_cast<int>(t)));
}

std::string_view to_string(DType t) {
    switch (t) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::u8: return "u8";
        case DType::i32: return "i32";
    }
    return "?";
}

namespace {

constexpr char kMagic[4] = {'F', 'N', 'G', 'I'};

template <typename T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    if constexpr (std::is_same_v<T, double>) return DType::f64;
    if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
    if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    return v;
}

template <typename T>
void encode_values(std::vector<std::uint8_t>& out, const std::vector<T>& values) {
    out.reserve(out.size() + values.size() * sizeof(T));
    for (T v : values) {
        if constexpr (std::is_same_v<T, float>) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_le(out, bits);
        } else if constexpr (std::is_same_v<T, double>) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_le(out, bits);
        } else if constexpr (std::is_same_v<T, std::int32_t>) {
            put_le(out, static_cast<std::uint32_t>(v));
        } else {
            out.push_back(v);
        }
    }
}

template <typename T>
std::vector<T> decode_values(const std::vector<std::uint8_t>& bytes) {
    const std::size_t n = bytes.size() / sizeof(T);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* p = bytes.data() + i * sizeof(T);
        if constexpr (std::is_same_v<T, float>) {
            const auto bits = get_le<std::uint32_t>(p);
            std::memcpy(&out[i], &bits, 4);
        } else if constexpr (std::is_same_v<T, double>) {
            const auto bits = get_le<std::uint64_t>(p);
            std::memcpy(&out[i], &bits, 8);
        } else if constexpr (std::is_same_v<T, std::int32_t>) {
            out[i] = static_cast<std::int32_t>(get_le<std::uint32_t>(p));
        } else {
            out[i] = p[0];
        }
    }
    return out;
}

template <typename T>
StoreSection make_section(std::string_view name, const Tensor<T>& t) {
    StoreSection s;
    s.name = std::string(name);
    s.dtype = static_cast<std::uint8_t>(dtype_of<T>());
    s.extents = t.shape();
    encode_values(s.payload, t.values());
    return s;
}

std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, std::numeric_limits<uInt>::max()));
        c = crc32(c, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

}  // namespace

void TensorStore::put_section(StoreSection section) {
    if (section.name.empty()) throw DataError("section name must not be empty");
    for (auto& s : sections_) {
        if (s.name == section.name) {
            s = std::move(section);
            return;
        }
    }
    sections_.push_back(std::move(section));
}

void TensorStore::put(std::string_view name, const Tensor<float>& t) { put_section(make_section(name, t)); }
void TensorStore::put(std::string_view name, const Tensor<double>& t) { put_section(make_section(name, t)); }
void TensorStore::put(std::string_view name, const Tensor<std::uint8_t>& t) { put_section(make_section(name, t)); }
void TensorStore::put(std::string_view name, const Tensor<std::int32_t>& t) { put_section(make_section(name, t)); }

void TensorStore::put_string(std::string_view name, std::string_view text) {
    put(name, Tensor<std::uint8_t>(Shape{text.size()}, std::vector<std::uint8_t>(text.begin(), text.end())));
}

bool TensorStore::has(std::string_view name) const {
    for (const auto& s : sections_) {
        if (s.name == name) return true;
    }
    return false;
}

const StoreSection& TensorStore::section(std::string_view name) const {
    for (const auto& s : sections_) {
        if (s.name == name) return s;
    }
    throw DataError("missing section '" + std::string(name) + "'");
}

template <typename T>
Tensor<T> TensorStore::get(std::string_view name) const {
    const StoreSection& s = section(name);
    if (s.dtype != static_cast<std::uint8_t>(dtype_of<T>())) {
        throw DataError("section '" + s.name + "' has dtype tag " + std::to_string(s.dtype) + ", expected " +
                        std::string(to_string(dtype_of<T>())));
    }
    return Tensor<T>(s.extents, decode_values<T>(s.payload));
}

std::string TensorStore::get_string(std::string_view name) const {
    const Tensor<std::uint8_t> t = get<std::uint8_t>(name);
    return std::string(t.values().begin(), t.values().end());
}

std::vector<std::uint8_t> TensorStore::serialize() const {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_le(out, kVersion);
    put_le(out, std::uint16_t{0});
    put_le(out, static_cast<std::uint32_t>(sections_.size()));
    for (const auto& s : sections_) {
        const std::size_t start = out.size();
        put_le(out, static_cast<std::uint32_t>(s.name.size()));
        out.insert(out.end(), s.name.begin(), s.name.end());
        out.push_back(s.dtype);
        if (s.extents.size() > 255) throw DataError("rank too large for section '" + s.name + "'");
        out.push_back(static_cast<std::uint8_t>(s.extents.size()));
        put_le(out, std::uint16_t{0});
        for (auto e : s.extents) put_le(out, static_cast<std::uint64_t>(e));
        put_le(out, static_cast<std::uint64_t>(s.payload.size()));
        out.insert(out.end(), s.payload.begin(), s.payload.end());
        put_le(out, crc(out.data() + start, out.size() - start));
    }
    return out;
}

TensorStore TensorStore::parse(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (bytes.size() - pos < n) throw DataError("truncated tensor store at byte " + std::to_string(pos));
    };
    need(12);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw DataError("not a FNGI tensor store (bad magic)");
    const auto version = get_le<std::uint16_t>(bytes.data() + 4);
    if (version == 0 || version > kVersion) throw DataError("unsupported tensor store version " + std::to_string(version));
    const auto count = get_le<std::uint32_t>(bytes.data() + 8);
    pos = 12;
    TensorStore store;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::size_t start = pos;
        StoreSection s;
        need(4);
        const auto name_len = get_le<std::uint32_t>(bytes.data() + pos);
        pos += 4;
        need(name_len + 4);
        s.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
        pos += name_len;
        s.dtype = bytes[pos];
        const std::size_t rank = bytes[pos + 1];
        pos += 4;
        need(rank * 8 + 8);
        for (std::size_t r = 0; r < rank; ++r, pos += 8) s.extents.push_back(get_le<std::uint64_t>(bytes.data() + pos));
        const auto len = get_le<std::uint64_t>(bytes.data() + pos);
        pos += 8;
        need(len);
        need(len + 4);
        s.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
        const auto stored = get_le<std::uint32_t>(bytes.data() + pos);
        if (stored != crc(bytes.data() + start, pos - start)) throw DataError("CRC mismatch in section '" + s.name + "'");
        pos += 4;
        if (s.dtype >= 1 && s.dtype <= 4 && s.payload.size() != shape_numel(s.extents) * dtype_size(DType(s.dtype))) {
            throw DataError("section '" + s.name + "' payload length disagrees with its extents");
        }
        store.sections_.push_back(std::move(s));
    }
    return store;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot write " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw DataError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void TensorStore::save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

TensorStore TensorStore::load(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    return parse(std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string encode_meta(const std::map<std::string, std::string>& kv) {
    std::string out;
    for (const auto& [k, v] : kv) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw DataError("metadata key/value may not contain '=' or newlines: " + k);
        }
        out += k + "=" + v + "\n";
    }
    return out;
}

std::map<std::string, std::string> decode_meta(std::string_view text) {
    std::map<std::string, std::string> kv;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos) throw DataError("malformed metadata line '" + std::string(line) + "'");
        kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
    }
    return kv;
}

namespace {

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (!s.empty() && pos <= s.size()) {
        const std::size_t c = std::min(s.find(',', pos), s.size());
        out.push_back(s.substr(pos, c - pos));
        pos = c + 1;
    }
    return out;
}

const std::string& meta_at(const std::map<std::string, std::string>& m, const std::string& k) {
    auto it = m.find(k);
    if (it == m.end()) throw DataError("feature bank metadata lacks '" + k + "'");
    return it->second;
}

}  // namespace

TensorStore bank_to_store(const FeatureBank& bank) {
    bank.validate();
    TensorStore s;
    std::map<std::string, std::string> meta;
    meta["format_version"] = std::to_string(FeatureBank::kFormatVersion);
    meta["split"] = bank.split;
    meta["config_hash"] = std::to_string(bank.config_hash);
    meta["objectives"] = join(bank.objectives);
    meta["gradient_source"] = bank.gradient_source;
    meta["projection_kind"] = bank.projection_kind;
    std::vector<std::string> seeds;
    for (auto v : bank.projection_seeds) seeds.push_back(std::to_string(v));
    meta["projection_seeds"] = join(seeds);
    meta["pca_dim"] = std::to_string(bank.pca_dim);
    meta["count"] = std::to_string(bank.size());
    s.put_string("meta", encode_meta(meta));
    s.put_string("config", bank.config_echo);
    std::vector<std::int32_t> ids;
    for (auto id : bank.ids) {
        if (id < std::numeric_limits<std::int32_t>::min() || id > std::numeric_limits<std::int32_t>::max()) {
            throw DataError("sample id " + std::to_string(id) + " does not fit in 32 bits");
        }
        ids.push_back(static_cast<std::int32_t>(id));
    }
    s.put("ids", Tensor<std::int32_t>(Shape{ids.size()}, ids));
    s.put("labels", Tensor<std::int32_t>(Shape{bank.labels.size()}, bank.labels));
    if (!bank.embeddings.empty()) s.put("embeddings", bank.embeddings);
    for (std::size_t k = 0; k < bank.gradients.size(); ++k) s.put("gradients." + bank.objectives[k], bank.gradients[k]);
    s.put("fused", bank.fused);
    return s;
}

FeatureBank bank_from_store(const TensorStore& s) {
    const auto meta = decode_meta(s.get_string("meta"));
    if (meta_at(meta, "format_version") != std::to_string(FeatureBank::kFormatVersion)) {
        throw DataError("unsupported feature bank version " + meta_at(meta, "format_version"));
    }
    FeatureBank b;
    b.split = meta_at(meta, "split");
    b.config_hash = std::stoull(meta_at(meta, "config_hash"));
    b.objectives = split(meta_at(meta, "objectives"));
    b.gradient_source = meta_at(meta, "gradient_source");
    b.projection_kind = meta_at(meta, "projection_kind");
    for (const auto& v : split(meta_at(meta, "projection_seeds"))) b.projection_seeds.push_back(std::stoull(v));
    b.pca_dim = std::stoull(meta_at(meta, "pca_dim"));
    b.config_echo = s.has("config") ? s.get_string("config") : std::string();
    const Tensor<std::int32_t> ids = s.get<std::int32_t>("ids");
    b.ids.assign(ids.values().begin(), ids.values().end());
    b.labels = s.get<std::int32_t>("labels").values();
    if (s.has("embeddings")) b.embeddings = s.get<double>("embeddings");
    for (const auto& o : b.objectives) b.gradients.push_back(s.get<double>("gradients." + o));
    b.fused = s.get<double>("fused");
    b.validate();
    return b;
}

void save_bank(const std::filesystem::path& path, const FeatureBank& bank) { bank_to_store(bank).save(path); }

FeatureBank load_bank(const std::filesystem::path& path) { return bank_from_store(TensorStore::load(path)); }

void put_pca(TensorStore& store, const PcaModel& model) {
    store.put("pca.mean", Tensor<double>(Shape{model.mean.size()}, model.mean));
    store.put("pca.components", model.components);
    store.put("pca.explained_variance", Tensor<double>(Shape{model.explained_variance.size()}, model.explained_variance));
}

PcaModel get_pca(const TensorStore& store) {
    PcaModel m;
    m.mean = store.get<double>("pca.mean").values();
    m.components = store.get<double>("pca.components");
    m.explained_variance = store.get<double>("pca.explained_variance").values();
    if (m.components.rank() != 2 || m.components.dim(0) != m.explained_variance.size() || m.components.dim(1) != m.mean.size()) {
        throw DataError("inconsistent PCA sections");
    }
    return m;
}

template Tensor<float> TensorStore::get<float>(std::string_view) const;
template Tensor<double> TensorStore::get<double>(std::string_view) const;
template Tensor<std::uint8_t> TensorStore::get<std::uint8_t>(std::string_view) const;
template Tensor<std::int32_t> TensorStore::get<std::int32_t>(std::string_view) const;

}  // namespace fungi
