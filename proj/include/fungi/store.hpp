#pragma once

// "FNGI" tensor container: named, typed, CRC-checked sections.
//
//   magic "FNGI" | u16 version | u16 reserved | u32 section count
//   per section:
//     u32 name length | name | u8 dtype | u8 rank | u16 reserved | u64 extents[rank]
//     u64 payload bytes | payload (little-endian) | u32 CRC32 of everything above in the section

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fungi/features.hpp"
#include "fungi/tensor.hpp"

namespace fungi {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3, i32 = 4 };

std::size_t dtype_size(DType t);
std::string_view to_string(DType t);

struct StoreSection {
    std::string name;
    std::uint8_t dtype = 0;  // raw tag; unknown tags are kept and skipped by typed readers
    Shape extents;
    std::vector<std::uint8_t> payload;
};

class TensorStore {
public:
    static constexpr std::uint16_t kVersion = 1;

    void put(std::string_view name, const Tensor<float>& t);
    void put(std::string_view name, const Tensor<double>& t);
    void put(std::string_view name, const Tensor<std::uint8_t>& t);
    void put(std::string_view name, const Tensor<std::int32_t>& t);
    void put_string(std::string_view name, std::string_view text);
    // Raw section, e.g. one carried over from another file.
    void put_section(StoreSection section);

    bool has(std::string_view name) const;
    const StoreSection& section(std::string_view name) const;
    const std::vector<StoreSection>& sections() const { return sections_; }

    template <typename T>
    Tensor<T> get(std::string_view name) const;
    std::string get_string(std::string_view name) const;

    std::vector<std::uint8_t> serialize() const;
    static TensorStore parse(const std::vector<std::uint8_t>& bytes);

    // Written to a temporary sibling, then renamed into place.
    void save(const std::filesystem::path& path) const;
    static TensorStore load(const std::filesystem::path& path);

private:
    std::vector<StoreSection> sections_;
};

// Flat "key=value" lines, sorted by key.
std::string encode_meta(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> decode_meta(std::string_view text);

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_text_file(const std::filesystem::path& path);

TensorStore bank_to_store(const FeatureBank& bank);
FeatureBank bank_from_store(const TensorStore& store);
void save_bank(const std::filesystem::path& path, const FeatureBank& bank);
FeatureBank load_bank(const std::filesystem::path& path);

void put_pca(TensorStore& store, const PcaModel& model);
PcaModel get_pca(const TensorStore& store);

}  // namespace fungi
