#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "adfq/bundle.hpp"
#include "adfq/tensor.hpp"
#include "adfq/vit.hpp"

namespace adfq {

namespace fs = std::filesystem;

/// On-disk container: a JSON manifest plus one blob of little-endian
/// binary32 values, row-major, concatenated in manifest order. The blob
/// lives next to the manifest with the extension replaced by ".bin".
struct NamedTensor {
  std::string name;
  std::vector<Index> shape;
  Vector data;
};

struct Container {
  std::string format;
  int version = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const;
};

inline constexpr const char* kCheckpointFormat = "ADFQ-CKPT";
inline constexpr const char* kBundleFormat = "ADFQ-QNT";
inline constexpr const char* kDatasetFormat = "ADFQ-DATA";

fs::path blob_path_for(const fs::path& manifest);

void write_container(const fs::path& manifest, const Container& c);
Container read_container(const fs::path& manifest, const std::string& expected_format);

/// Writes `contents` to `path` via a temporary file and rename.
void write_file_atomic(const fs::path& path, const std::string& contents);
std::string read_file(const fs::path& path);

nlohmann::json config_to_json(const ViTConfig& c);
ViTConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const ViTModel& model, const fs::path& manifest);
ViTModel load_checkpoint(const fs::path& manifest);

/// `info` is stored verbatim in the manifest (config echo, loss traces).
void save_bundle(const QuantBundle& bundle, const fs::path& manifest,
                 const nlohmann::json& info = nlohmann::json::object());
QuantBundle load_bundle(const fs::path& manifest);
nlohmann::json load_bundle_info(const fs::path& manifest);

}  // namespace adfq
