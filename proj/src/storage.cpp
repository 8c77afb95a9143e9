#include "adfq/storage.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace adfq {

using nlohmann::json;

namespace {

const char* const kReservedKeys[] = {"format", "version", "blob", "tensors"};

void append_f32(std::string& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof u);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xffu));
}

double read_f32(const std::string& blob, std::size_t pos) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[pos + i])) << (8 * i);
  float f;
  std::memcpy(&f, &u, sizeof f);
  return static_cast<double>(f);
}

Index numel_of(const std::vector<Index>& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

template <typename T>
T require(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(where + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

const NamedTensor& Container::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("missing tensor '" + name + "'");
}

fs::path blob_path_for(const fs::path& manifest) {
  fs::path p = manifest;
  p.replace_extension(".bin");
  if (p == manifest) p += ".bin";
  return p;
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_container(const fs::path& manifest, const Container& c) {
  std::string blob;
  json tensors = json::array();
  for (const auto& t : c.tensors) {
    if (numel_of(t.shape) != t.data.size()) throw DimensionError("tensor '" + t.name + "' data does not match shape");
    if (!t.data.allFinite()) throw NumericalError("tensor '" + t.name + "' has non-finite values");
    const std::size_t offset = blob.size();
    for (Index i = 0; i < t.data.size(); ++i) append_f32(blob, t.data[i]);
    tensors.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"byte_length", blob.size() - offset}});
  }
  json m = c.meta.is_object() ? c.meta : json::object();
  m["format"] = c.format;
  m["version"] = c.version;
  m["blob"] = blob_path_for(manifest).filename().string();
  m["tensors"] = std::move(tensors);
  write_file_atomic(blob_path_for(manifest), blob);
  write_file_atomic(manifest, m.dump(2) + "\n");
}

Container read_container(const fs::path& manifest, const std::string& expected_format) {
  const std::string text = read_file(manifest);
  json m;
  try {
    m = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("corrupt manifest '" + manifest.string() + "': " + e.what());
  }
  const std::string where = "manifest '" + manifest.string() + "'";
  Container c;
  c.format = require<std::string>(m, "format", where);
  c.version = require<int>(m, "version", where);
  if (c.format != expected_format) throw FormatError(where + ": format '" + c.format + "', expected '" + expected_format + "'");
  if (c.version != 1) throw FormatError(where + ": unsupported version " + std::to_string(c.version));
  const fs::path blob_file = manifest.parent_path() / require<std::string>(m, "blob", where);
  const std::string blob = read_file(blob_file);

  const json& list = m.contains("tensors") ? m.at("tensors") : json();
  if (!list.is_array()) throw FormatError(where + ": 'tensors' must be an array");
  for (const auto& e : list) {
    NamedTensor t;
    t.name = require<std::string>(e, "name", where);
    const std::string tw = where + " tensor '" + t.name + "'";
    t.shape = require<std::vector<Index>>(e, "shape", tw);
    for (Index s : t.shape) {
      if (s <= 0) throw FormatError(tw + ": non-positive extent");
    }
    const auto offset = require<std::size_t>(e, "offset", tw);
    const auto bytes = require<std::size_t>(e, "byte_length", tw);
    const Index n = numel_of(t.shape);
    if (bytes != static_cast<std::size_t>(n) * 4) {
      throw FormatError(tw + ": byte_length " + std::to_string(bytes) + " does not match shape " + shape_string(t.shape));
    }
    if (offset > blob.size() || bytes > blob.size() - offset) {
      throw FormatError(tw + ": truncated blob (needs bytes up to " + std::to_string(offset + bytes) + ", blob has " +
                        std::to_string(blob.size()) + ")");
    }
    t.data.resize(n);
    for (Index i = 0; i < n; ++i) t.data[i] = read_f32(blob, offset + static_cast<std::size_t>(i) * 4);
    c.tensors.push_back(std::move(t));
  }
  c.meta = m;
  for (const char* k : kReservedKeys) c.meta.erase(k);
  return c;
}

json config_to_json(const ViTConfig& c) {
  return {{"image_h", c.image_h}, {"image_w", c.image_w}, {"channels", c.channels},   {"patch_h", c.patch_h},
          {"patch_w", c.patch_w}, {"dim", c.dim},         {"heads", c.heads},         {"blocks", c.blocks},
          {"mlp_dim", c.mlp_dim}, {"num_classes", c.num_classes}, {"ln_eps", c.ln_eps}};
}

ViTConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ViTConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "image_h") c.image_h = value.get<Index>();
      else if (key == "image_w") c.image_w = value.get<Index>();
      else if (key == "channels") c.channels = value.get<Index>();
      else if (key == "patch_h") c.patch_h = value.get<Index>();
      else if (key == "patch_w") c.patch_w = value.get<Index>();
      else if (key == "dim") c.dim = value.get<Index>();
      else if (key == "heads") c.heads = value.get<Index>();
      else if (key == "blocks") c.blocks = value.get<Index>();
      else if (key == "mlp_dim") c.mlp_dim = value.get<Index>();
      else if (key == "num_classes") c.num_classes = value.get<Index>();
      else if (key == "ln_eps") c.ln_eps = value.get<double>();
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

namespace {

template <typename M>
NamedTensor named(const std::string& name, const M& m) {
  NamedTensor t{name, {}, Eigen::Map<const Vector>(m.data(), m.size())};
  if (m.rows() == 1 && M::RowsAtCompileTime == 1) {
    t.shape = {m.cols()};
  } else {
    t.shape = {m.rows(), m.cols()};
  }
  return t;
}

template <typename M>
void fill(const Container& c, const std::string& name, M& target) {
  const NamedTensor& t = c.get(name);
  const std::vector<Index> want =
      M::RowsAtCompileTime == 1 ? std::vector<Index>{target.cols()} : std::vector<Index>{target.rows(), target.cols()};
  if (t.shape != want) {
    throw FormatError("tensor '" + name + "' has shape " + shape_string(t.shape) + ", expected " + shape_string(want));
  }
  target = Eigen::Map<const M>(t.data.data(), target.rows(), target.cols());
}

}  // namespace

void save_checkpoint(const ViTModel& model, const fs::path& manifest) {
  model.validate();
  Container c;
  c.format = kCheckpointFormat;
  c.meta["config"] = config_to_json(model.config);
  for_each_parameter(model, [&c](const std::string& name, const auto& m) { c.tensors.push_back(named(name, m)); });
  write_container(manifest, c);
}

ViTModel load_checkpoint(const fs::path& manifest) {
  const Container c = read_container(manifest, kCheckpointFormat);
  if (!c.meta.contains("config")) throw FormatError("checkpoint manifest has no config");
  ViTConfig config;
  try {
    config = config_from_json(c.meta.at("config"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  ViTModel model = zero_model(config);
  for_each_parameter(model, [&c](const std::string& name, auto& m) { fill(c, name, m); });
  if (!model.all_finite()) throw FormatError("checkpoint contains non-finite values");
  return model;
}

namespace {

json uniform_meta(const UniformParams& p, const std::string& prefix, Container& c) {
  c.tensors.push_back({prefix + ".scale", {p.scale.size()}, p.scale});
  c.tensors.push_back({prefix + ".zero_point", {p.zero_point.size()}, p.zero_point});
  return {{"granularity", granularity_name(p.granularity)},
          {"k", p.bits.bits()},
          {"scale", prefix + ".scale"},
          {"zero_point", prefix + ".zero_point"}};
}

UniformParams uniform_from_meta(const json& j, const Container& c, const std::string& where) {
  UniformParams p;
  p.granularity = parse_granularity(require<std::string>(j, "granularity", where));
  p.bits = BitWidth(require<int>(j, "k", where));
  p.scale = c.get(require<std::string>(j, "scale", where)).data;
  p.zero_point = c.get(require<std::string>(j, "zero_point", where)).data;
  try {
    p.validate();
  } catch (const PreconditionError& e) {
    throw FormatError(where + ": " + e.what());
  }
  return p;
}

json alpha_json(double alpha) { return std::isinf(alpha) ? json(nullptr) : json(alpha); }

double alpha_from_json(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

void save_bundle(const QuantBundle& bundle, const fs::path& manifest, const json& info) {
  Container c;
  c.format = kBundleFormat;
  c.meta["info"] = info;
  c.meta["bits_w"] = bundle.bits_w;
  c.meta["bits_a"] = bundle.bits_a;
  json blocks = json::array();
  for (std::size_t l = 0; l < bundle.blocks.size(); ++l) {
    const BlockQuant& b = bundle.blocks[l];
    const std::string bp = "blocks." + std::to_string(l) + ".";
    json sites = json::object();
    for (SiteKind k : kAllSites) {
      const ActQuant& a = b.site(k);
      const std::string sp = bp + site_name(k);
      json s = {{"kind", quantizer_kind_name(a.kind)}};
      if (a.uses_uniform()) s.update(uniform_meta(a.uniform, sp, c));
      if (a.kind == QuantizerKind::OutlierPerPatch) {
        s["alpha"] = alpha_json(a.outlier.alpha);
        s["outlier_rule"] = outlier_rule_name(a.outlier.rule);
      }
      if (a.kind == QuantizerKind::Log2 || a.kind == QuantizerKind::ShiftLog2) {
        c.tensors.push_back({sp + ".log2", {2}, Vector{{a.log2.scale, a.log2.shift}}});
        s["k"] = a.log2.bits.bits();
        s["epsilon"] = a.log2.epsilon;
        s["shifted"] = a.log2.shifted;
        s["params"] = sp + ".log2";
      }
      sites[site_name(k)] = std::move(s);
    }
    json weights = json::object();
    const std::pair<const char*, const WeightQuant*> layers[] = {
        {"qkv", &b.qkv}, {"proj", &b.proj}, {"fc1", &b.fc1}, {"fc2", &b.fc2}};
    for (const auto& [name, wq] : layers) {
      const std::string wp = bp + name;
      json w = uniform_meta(wq->params, wp, c);
      c.tensors.push_back(named(wp + ".v", wq->v));
      c.tensors.push_back(named(wp + ".round_up", wq->round_up));
      w["v"] = wp + ".v";
      w["round_up"] = wp + ".round_up";
      w["use_zero_point"] = wq->use_zero_point;
      weights[name] = std::move(w);
    }
    blocks.push_back({{"sites", std::move(sites)}, {"weights", std::move(weights)}});
  }
  c.meta["blocks"] = std::move(blocks);
  write_container(manifest, c);
}

QuantBundle load_bundle(const fs::path& manifest) {
  const Container c = read_container(manifest, kBundleFormat);
  const std::string where = "bundle '" + manifest.string() + "'";
  QuantBundle bundle;
  bundle.bits_w = require<int>(c.meta, "bits_w", where);
  bundle.bits_a = require<int>(c.meta, "bits_a", where);
  const json blocks = require<json>(c.meta, "blocks", where);
  if (!blocks.is_array()) throw FormatError(where + ": 'blocks' must be an array");
  try {
    for (const auto& bj : blocks) {
      BlockQuant b;
      const json sites = require<json>(bj, "sites", where);
      for (SiteKind k : kAllSites) {
        const std::string sw = where + " site " + site_name(k);
        const json s = require<json>(sites, site_name(k), sw);
        ActQuant& a = b.site(k);
        a.kind = parse_quantizer_kind(require<std::string>(s, "kind", sw));
        if (a.uses_uniform()) a.uniform = uniform_from_meta(s, c, sw);
        if (a.kind == QuantizerKind::OutlierPerPatch) {
          a.outlier.alpha = alpha_from_json(s.at("alpha"));
          a.outlier.rule = parse_outlier_rule(require<std::string>(s, "outlier_rule", sw));
        }
        if (a.kind == QuantizerKind::Log2 || a.kind == QuantizerKind::ShiftLog2) {
          const NamedTensor& t = c.get(require<std::string>(s, "params", sw));
          if (t.data.size() != 2) throw FormatError(sw + ": log2 params must hold 2 values");
          a.log2 = Log2Params{t.data[0], BitWidth(require<int>(s, "k", sw)), t.data[1],
                              require<double>(s, "epsilon", sw), require<bool>(s, "shifted", sw)};
          a.log2.validate();
        }
      }
      const json weights = require<json>(bj, "weights", where);
      const std::pair<const char*, WeightQuant*> layers[] = {{"qkv", &b.qkv}, {"proj", &b.proj}, {"fc1", &b.fc1}, {"fc2", &b.fc2}};
      for (const auto& [name, wq] : layers) {
        const std::string ww = where + " weight " + name;
        const json w = require<json>(weights, name, ww);
        wq->params = uniform_from_meta(w, c, ww);
        const NamedTensor& v = c.get(require<std::string>(w, "v", ww));
        const NamedTensor& up = c.get(require<std::string>(w, "round_up", ww));
        if (v.shape.size() != 2 || up.shape != v.shape) throw FormatError(ww + ": bad rounding tensor shapes");
        wq->v = Eigen::Map<const Matrix>(v.data.data(), v.shape[0], v.shape[1]);
        wq->round_up = Eigen::Map<const Matrix>(up.data.data(), up.shape[0], up.shape[1]);
        wq->use_zero_point = require<bool>(w, "use_zero_point", ww);
        if (wq->params.groups() != wq->v.cols()) throw FormatError(ww + ": channel count mismatch");
      }
      bundle.blocks.push_back(std::move(b));
    }
  } catch (const PreconditionError& e) {
    throw FormatError(where + ": " + e.what());
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  return bundle;
}

json load_bundle_info(const fs::path& manifest) {
  const Container c = read_container(manifest, kBundleFormat);
  return c.meta.contains("info") ? c.meta.at("info") : json::object();
}

}  // namespace adfq
