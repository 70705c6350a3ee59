#include "ttg/checkpoint.hpp"

#include <bit>
#include <fstream>

#include <zlib.h>

namespace ttg {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

namespace fs = std::filesystem;

namespace {

constexpr const char* kBlob = "tensors.bin";
constexpr const char* kManifest = "manifest.json";

std::uint32_t crc_bytes(const std::vector<double>& values) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(values.data());
  std::size_t left = values.size() * sizeof(double);
  while (left > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void write_tensors(const fs::path& dir, const TensorMap& tensors, const nlohmann::json& meta) {
  fs::create_directories(dir);
  std::vector<double> flat;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", flat.size()}});
    flat.insert(flat.end(), t.data(), t.data() + t.size());
  }
  {
    std::ofstream out(dir / kBlob, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!out) throw std::runtime_error("cannot write " + (dir / kBlob).string());
  }
  const nlohmann::json manifest = {{"format_version", kFormatVersion},
                                   {"blob", kBlob},
                                   {"dtype", "float64-le"},
                                   {"n_values", flat.size()},
                                   {"crc32", crc_bytes(flat)},
                                   {"tensors", entries},
                                   {"meta", meta}};
  std::ofstream out(dir / kManifest, std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / kManifest).string());
}

std::pair<TensorMap, nlohmann::json> read_tensors(const fs::path& dir) {
  std::ifstream in(dir / kManifest);
  if (!in) throw std::runtime_error("missing manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unreadable manifest in " + dir.string() + ": " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kFormatVersion)
    throw FormatError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                      std::to_string(kFormatVersion) + ")");
  const std::size_t n = manifest.at("n_values").get<std::size_t>();
  std::vector<double> flat(n);
  std::ifstream blob(dir / manifest.at("blob").get<std::string>(), std::ios::binary);
  if (!blob) throw std::runtime_error("missing blob in " + dir.string());
  blob.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::size_t>(blob.gcount()) != n * sizeof(double) || blob.peek() != EOF)
    throw ChecksumError("blob size does not match manifest in " + dir.string());
  if (crc_bytes(flat) != manifest.at("crc32").get<std::uint32_t>())
    throw ChecksumError("blob checksum mismatch in " + dir.string());
  TensorMap tensors;
  for (const auto& e : manifest.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t count = numel(shape);
    if (off + count > n) throw FormatError("tensor '" + e.at("name").get<std::string>() + "' exceeds blob");
    tensors.emplace(e.at("name").get<std::string>(),
                    Tensor(shape, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                                      flat.begin() + static_cast<std::ptrdiff_t>(off + count))));
  }
  return {std::move(tensors), manifest.at("meta")};
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  TensorMap tensors;
  for (const auto& [k, t] : ckpt.backbone.state()) tensors.emplace("backbone/" + k, t);
  for (const auto& [k, t] : ckpt.generator.parameters()) tensors.emplace("generator/" + k, t);
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& s : ckpt.backbone.list_slots())
    slots.push_back({{"id", s.id}, {"kind", to_string(s.kind)}, {"shape", s.shape}, {"depth", s.depth}});
  const nlohmann::json meta = {{"kind", "checkpoint"},
                               {"config", ckpt.config},
                               {"config_hash", ckpt.config.hash()},
                               {"backbone_spec", ckpt.backbone.spec()},
                               {"generator_spec", ckpt.generator.spec()},
                               {"slots", slots},
                               {"best_iter", ckpt.best_iter},
                               {"best_val_acc", ckpt.best_val_acc},
                               {"metrics", ckpt.metrics}};
  write_tensors(dir, tensors, meta);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  auto [tensors, meta] = read_tensors(dir);
  if (meta.value("kind", "") != "checkpoint") throw FormatError(dir.string() + " is not a checkpoint");
  Checkpoint c;
  c.config = meta.at("config").get<TrainConfig>();
  if (c.config.hash() != meta.at("config_hash").get<std::string>())
    throw FormatError("config hash mismatch in " + dir.string());
  TensorMap bb, gen;
  for (auto& [k, t] : tensors) {
    if (k.rfind("backbone/", 0) == 0) bb.emplace(k.substr(9), std::move(t));
    else if (k.rfind("generator/", 0) == 0) gen.emplace(k.substr(10), std::move(t));
  }
  c.backbone = Backbone(meta.at("backbone_spec").get<BackboneSpec>(), 0);
  c.backbone.load_state(bb);
  c.generator = Generator(meta.at("generator_spec").get<GeneratorSpec>(), c.backbone.spec(), 0);
  for (const auto& [k, t] : c.generator.parameters())
    if (!gen.count(k) || gen.at(k).shape() != t.shape())
      throw FormatError("generator tensor '" + k + "' missing or mis-shaped");
  if (gen.size() != c.generator.parameters().size()) throw FormatError("unexpected generator tensors");
  c.generator.parameters() = std::move(gen);
  c.best_iter = meta.at("best_iter").get<std::size_t>();
  c.best_val_acc = meta.at("best_val_acc").get<double>();
  c.metrics = meta.at("metrics").get<std::vector<MetricsRow>>();
  return c;
}

void save_trainer_state(const fs::path& dir, const Trainer& trainer) {
  nlohmann::json meta = trainer.state_meta();
  meta["kind"] = "trainer_state";
  write_tensors(dir, trainer.state_tensors(), meta);
}

void load_trainer_state(const fs::path& dir, Trainer& trainer) {
  auto [tensors, meta] = read_tensors(dir);
  if (meta.value("kind", "") != "trainer_state") throw FormatError(dir.string() + " is not a trainer state");
  trainer.restore(tensors, meta);
}

}  // namespace ttg
