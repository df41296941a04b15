// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include "json.hpp"
#include <zlib.h>

#include "budbreak/error.hpp"
#include "budbreak/models.hpp"

namespace budbreak {

static_assert(std::endian::native == std::endian::little,
              "checkpoint arrays are written in host order and must be little-endian");

namespace {

constexpr char kMagic[8] = {'B', 'U', 'D', 'B', 'R', 'K', 'P', 'T'};
constexpr std::size_t kHeaderSize = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);

using nlohmann::json;

json spec_to_json(const ModelSpec& spec) {
  return json{{"variant", variant_name(spec.variant)},
              {"input_dim", spec.input_dim},
              {"fc_dims", spec.fc_dims},
              {"gru_hidden", spec.gru_hidden},
              {"num_cultivars", spec.num_cultivars},
              {"embedding_dim", spec.embedding_dim},
              {"embed_at", embed_at_name(spec.embed_at)}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.variant = parse_variant(j.at("variant").get<std::string>());
  spec.input_dim = j.at("input_dim").get<int>();
  spec.fc_dims = j.at("fc_dims").get<std::array<int, 3>>();
  spec.gru_hidden = j.at("gru_hidden").get<int>();
  spec.num_cultivars = j.at("num_cultivars").get<int>();
  spec.embedding_dim = j.at("embedding_dim").get<int>();
  spec.embed_at = parse_embed_at(j.at("embed_at").get<std::string>());
  spec.validate();
  return spec;
}

struct ArrayRef {
  std::string name;
  const Tensor2* tensor = nullptr;
};

template <typename T>
void append_raw(std::string& out, const T& value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_raw(const std::string& bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

std::uint32_t checksum(const char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  ckpt.spec.validate();
  const Eigen::Index nf = ckpt.norm.mean.size();
  if (ckpt.norm.stddev.size() != nf) throw ShapeError("checkpoint: norm mean/std sizes differ");
  const Tensor2 norm_mean = ckpt.norm.mean;
  const Tensor2 norm_std = ckpt.norm.stddev;

  std::vector<ArrayRef> arrays = {{"norm.mean", &norm_mean}, {"norm.stddev", &norm_std}};
  const ParamSet layout = ParamSet::zeros(ckpt.spec);
  const auto expected = layout.entries();
  const auto entries = ckpt.params.entries();
  if (entries.size() != expected.size()) throw ShapeError("checkpoint: parameters do not match spec");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].tensor->rows() != expected[i].tensor->rows() ||
        entries[i].tensor->cols() != expected[i].tensor->cols()) {
      throw ShapeError(fmt::format("checkpoint: {} has shape {} but spec needs {}", entries[i].name,
                                   shape_string(entries[i].tensor->rows(), entries[i].tensor->cols()),
                                   shape_string(expected[i].tensor->rows(),
                                                expected[i].tensor->cols())));
    }
    arrays.push_back({std::string(entries[i].name), entries[i].tensor});
  }

  json manifest;
  manifest["format"] = "budbreak-checkpoint";
  manifest["spec"] = spec_to_json(ckpt.spec);
  manifest["meta"] = json{{"seed", ckpt.meta.seed},
                          {"epochs", ckpt.meta.epochs},
                          {"trial", ckpt.meta.trial},
                          {"cultivars", ckpt.meta.cultivars},
                          {"feature_names", ckpt.meta.feature_names},
                          {"test_years", ckpt.meta.test_years}};
  json listing = json::array();
  for (const auto& a : arrays) {
    listing.push_back(json{{"name", a.name}, {"rows", a.tensor->rows()}, {"cols", a.tensor->cols()}});
  }
  manifest["arrays"] = listing;
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_raw(out, kCheckpointVersion);
  append_raw(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  for (const auto& a : arrays) {
    out.append(reinterpret_cast<const char*>(a.tensor->data()),
               sizeof(double) * static_cast<std::size_t>(a.tensor->size()));
  }
  append_raw(out, checksum(out.data(), out.size()));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::optional<ModelSpec>& expected) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a budbreak checkpoint (bad magic)");
  }
  if (bytes.size() < kHeaderSize + sizeof(std::uint32_t)) throw FormatError("checkpoint truncated");
  const auto version = read_raw<std::uint32_t>(bytes, sizeof(kMagic));
  if (version != kCheckpointVersion) {
    throw FormatError(fmt::format("checkpoint format version {} (this build reads {})", version,
                                  kCheckpointVersion));
  }
  const auto manifest_size = read_raw<std::uint64_t>(bytes, sizeof(kMagic) + sizeof(std::uint32_t));
  if (manifest_size > bytes.size() - kHeaderSize - sizeof(std::uint32_t)) {
    throw FormatError("checkpoint truncated inside manifest");
  }
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderSize,
                           bytes.begin() + kHeaderSize + static_cast<std::ptrdiff_t>(manifest_size));
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("checkpoint manifest unreadable: {}", e.what()));
  }

  std::size_t payload = 0;
  try {
    for (const auto& a : manifest.at("arrays")) {
      payload += sizeof(double) * a.at("rows").get<std::size_t>() * a.at("cols").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("checkpoint manifest malformed: {}", e.what()));
  }
  const std::size_t total = kHeaderSize + manifest_size + payload + sizeof(std::uint32_t);
  if (bytes.size() < total) throw FormatError("checkpoint truncated");
  if (bytes.size() > total) throw FormatError("checkpoint has trailing bytes");
  const auto stored = read_raw<std::uint32_t>(bytes, total - sizeof(std::uint32_t));
  if (stored != checksum(bytes.data(), total - sizeof(std::uint32_t))) {
    throw FormatError("checkpoint checksum mismatch");
  }

  Checkpoint ckpt;
  try {
    ckpt.spec = spec_from_json(manifest.at("spec"));
    const json& meta = manifest.at("meta");
    ckpt.meta.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.meta.epochs = meta.at("epochs").get<int>();
    ckpt.meta.trial = meta.at("trial").get<int>();
    ckpt.meta.cultivars = meta.at("cultivars").get<std::vector<std::string>>();
    ckpt.meta.feature_names = meta.at("feature_names").get<std::vector<std::string>>();
    ckpt.meta.test_years = meta.at("test_years").get<std::map<std::string, std::vector<int>>>();
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("checkpoint manifest malformed: {}", e.what()));
  } catch (const DataError& e) {
    throw FormatError(fmt::format("checkpoint manifest malformed: {}", e.what()));
  } catch (const ShapeError& e) {
    throw FormatError(fmt::format("checkpoint manifest malformed: {}", e.what()));
  }
  if (expected && !(*expected == ckpt.spec)) {
    throw SpecMismatchError(fmt::format("checkpoint holds [{}], requested [{}]", describe(ckpt.spec),
                                        describe(*expected)));
  }

  ckpt.params = ParamSet::zeros(ckpt.spec);
  const Eigen::Index nf = ckpt.spec.input_dim;
  Tensor2 norm_mean(nf, 1);
  Tensor2 norm_std(nf, 1);
  std::vector<ArrayRef> targets = {{"norm.mean", &norm_mean}, {"norm.stddev", &norm_std}};
  for (const auto& e : ckpt.params.entries()) targets.push_back({std::string(e.name), e.tensor});
  const auto& listing = manifest.at("arrays");
  if (listing.size() != targets.size()) {
    throw FormatError(fmt::format("checkpoint lists {} arrays, spec needs {}", listing.size(),
                                  targets.size()));
  }
  std::size_t offset = kHeaderSize + manifest_size;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Tensor2& t = *const_cast<Tensor2*>(targets[i].tensor);
    if (listing[i].at("name").get<std::string>() != targets[i].name ||
        listing[i].at("rows").get<Eigen::Index>() != t.rows() ||
        listing[i].at("cols").get<Eigen::Index>() != t.cols()) {
      throw FormatError(fmt::format("checkpoint array {} does not match spec layout ({} {})", i,
                                    targets[i].name, shape_string(t.rows(), t.cols())));
    }
    const std::size_t n = sizeof(double) * static_cast<std::size_t>(t.size());
    std::memcpy(t.data(), bytes.data() + offset, n);
    offset += n;
  }
  ckpt.norm.mean = norm_mean.col(0);
  ckpt.norm.stddev = norm_std.col(0);
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot write checkpoint {}", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(fmt::format("write failed for checkpoint {}", path.string()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelSpec>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open checkpoint {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str(), expected);
  } catch (const FormatError& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace budbreak
