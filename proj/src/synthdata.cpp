#include "ttg/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "ttg/rng.hpp"

namespace ttg::data {

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

// Glyph coordinates live in [-1, 1]^2.
std::vector<Segment> polyline(Rng& rng, int points, double extent) {
  std::vector<Segment> segs;
  double px = rng.uniform(-extent, extent), py = rng.uniform(-extent, extent);
  for (int i = 1; i < points; ++i) {
    double qx = 0, qy = 0;
    // keep strokes long enough to be visible at 16 px
    do {
      qx = rng.uniform(-extent, extent);
      qy = rng.uniform(-extent, extent);
    } while (std::hypot(qx - px, qy - py) < 0.5);
    segs.push_back({px, py, qx, qy});
    px = qx;
    py = qy;
  }
  return segs;
}

std::vector<Segment> class_strokes(std::uint64_t seed, int label) {
  Rng rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(label)));
  auto segs = polyline(rng, 4, 0.7);
  Rng extra(derive_seed(seed, 1500 + static_cast<std::uint64_t>(label)));
  auto tail = polyline(extra, 2, 0.7);
  segs.insert(segs.end(), tail.begin(), tail.end());
  return segs;
}

std::vector<Segment> subpopulation_strokes(std::uint64_t seed, int super, int variant) {
  Rng core(derive_seed(seed, 5000 + static_cast<std::uint64_t>(super)));
  auto segs = polyline(core, 3, 0.65);
  Rng deco(derive_seed(seed, 7000 + static_cast<std::uint64_t>(super) * 64 + static_cast<std::uint64_t>(variant)));
  auto tail = polyline(deco, 3, 0.8);
  segs.insert(segs.end(), tail.begin(), tail.end());
  return segs;
}

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (s.x0 + t * dx), py - (s.y0 + t * dy));
}

double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

// Per-sample jitter of a stroke set followed by rasterization and pixel noise.
Tensor render(std::vector<Segment> segs, Rng& rng, std::size_t size, double thickness_scale) {
  for (auto& s : segs) {
    s.x0 += 0.06 * rng.normal();
    s.y0 += 0.06 * rng.normal();
    s.x1 += 0.06 * rng.normal();
    s.y1 += 0.06 * rng.normal();
  }
  const double scale = rng.uniform(0.85, 1.1);
  const double shear = rng.uniform(-0.15, 0.15);
  const double tilt = rng.uniform(-6.0, 6.0) * std::numbers::pi / 180.0;
  const double tx = rng.uniform(-0.08, 0.08), ty = rng.uniform(-0.08, 0.08);
  const double thickness = rng.uniform(0.14, 0.24) * thickness_scale;
  const double c = std::cos(tilt), sn = std::sin(tilt);
  auto warp = [&](double& x, double& y) {
    const double xs = scale * (x + shear * y), ys = scale * y;
    x = c * xs - sn * ys + tx;
    y = sn * xs + c * ys + ty;
  };
  for (auto& s : segs) {
    warp(s.x0, s.y0);
    warp(s.x1, s.y1);
  }
  const double half = static_cast<double>(size) / 2.0;
  const double center = (static_cast<double>(size) - 1.0) / 2.0;
  const double pixel = 1.0 / half;
  Tensor img({size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) - center) / half;
      const double v = (static_cast<double>(y) - center) / half;
      double d = 1e9;
      for (const auto& s : segs) d = std::min(d, segment_distance(u, v, s));
      double val = std::clamp(1.0 - std::max(0.0, d - thickness / 2.0) / pixel, 0.0, 1.0);
      val = std::clamp(val + 0.05 * rng.normal(), 0.0, 1.0);
      img[y * size + x] = to_float_precision(val);
    }
  return img;
}

Rng sample_rng(std::uint64_t seed, std::uint64_t family, std::uint64_t a, std::uint64_t b) {
  return Rng(derive_seed(derive_seed(derive_seed(seed, family), a), b));
}

void write_le_bytes(std::ofstream& os, const void* p, std::size_t n) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, std::size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<T> out(count);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (static_cast<std::size_t>(is.gcount()) != count * sizeof(T))
    throw std::runtime_error("truncated tensor file " + path.string());
  return out;
}

}  // namespace

std::string to_string(OrderPolicy p) {
  return p == OrderPolicy::single_domain ? "single_domain" : "interleaved_random";
}

OrderPolicy parse_order_policy(const std::string& s) {
  if (s == "single_domain") return OrderPolicy::single_domain;
  if (s == "interleaved_random") return OrderPolicy::interleaved_random;
  throw std::invalid_argument("unknown order policy '" + s + "'");
}

Tensor rotate_image(const Tensor& image, double degrees) {
  if (image.rank() != 2 || image.dim(0) != image.dim(1))
    throw std::invalid_argument("rotate_image: expects a square [S,S] image");
  if (std::fmod(degrees, 360.0) == 0.0) return image;
  const std::size_t n = image.dim(0);
  const long ln = static_cast<long>(n);
  const double center = (static_cast<double>(n) - 1.0) / 2.0;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  auto at = [&](long y, long x) { return (y < 0 || x < 0 || y >= ln || x >= ln) ? 0.0 : image[y * ln + x]; };
  Tensor out({n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = static_cast<double>(x) - center, dy = static_cast<double>(y) - center;
      // inverse map; rows grow downwards, so this turns the picture counter-clockwise
      const double sx = c * dx - s * dy + center;
      const double sy = s * dx + c * dy + center;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long ix = static_cast<long>(fx), iy = static_cast<long>(fy);
      const double v = (1 - ay) * ((1 - ax) * at(iy, ix) + ax * at(iy, ix + 1)) +
                       ay * ((1 - ax) * at(iy + 1, ix) + ax * at(iy + 1, ix + 1));
      out[y * n + x] = v;
    }
  return out;
}

Tensor flip_horizontal(const Tensor& image) {
  const std::size_t n = image.dim(0), m = image.dim(1);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < m; ++x) out[y * m + x] = image[y * m + (m - 1 - x)];
  return out;
}

Tensor flip_vertical(const Tensor& image) {
  const std::size_t n = image.dim(0), m = image.dim(1);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < m; ++x) out[y * m + x] = image[(n - 1 - y) * m + x];
  return out;
}

Tensor render_base_sample(std::uint64_t seed, int label, std::size_t index, std::size_t image_size) {
  Rng rng = sample_rng(seed, 1, static_cast<std::uint64_t>(label), index);
  return render(class_strokes(seed, label), rng, image_size, 1.0);
}

std::vector<DomainDataset> make_rotated_domains(std::uint64_t seed, const std::vector<double>& angles,
                                                std::size_t n_per_domain, int n_classes,
                                                std::size_t image_size) {
  if (angles.empty()) throw std::invalid_argument("make_rotated_domains: angles must be nonempty");
  if (image_size < 8) throw std::invalid_argument("make_rotated_domains: image_size must be >= 8");
  if (n_classes < 2) throw std::invalid_argument("make_rotated_domains: n_classes must be >= 2");
  if (n_per_domain < static_cast<std::size_t>(n_classes))
    throw std::invalid_argument("make_rotated_domains: n_per_domain < n_classes");
  for (std::size_t i = 0; i < angles.size(); ++i)
    for (std::size_t j = i + 1; j < angles.size(); ++j)
      if (angles[i] == angles[j]) throw std::invalid_argument("make_rotated_domains: duplicate angle");

  // Base samples are shared across domains; only the rotation differs.
  std::vector<Tensor> base;
  base.reserve(n_per_domain);
  for (std::size_t i = 0; i < n_per_domain; ++i)
    base.push_back(render_base_sample(seed, static_cast<int>(i % static_cast<std::size_t>(n_classes)), i, image_size));

  std::vector<DomainDataset> out;
  const std::size_t plane = image_size * image_size;
  for (std::size_t d = 0; d < angles.size(); ++d) {
    DomainDataset ds;
    ds.domain_id = static_cast<int>(d);
    ds.n_classes = n_classes;
    ds.inputs = Tensor({n_per_domain, 1, image_size, image_size});
    ds.labels.resize(n_per_domain);
    ds.groups.assign(n_per_domain, -1);
    for (std::size_t i = 0; i < n_per_domain; ++i) {
      Tensor img = rotate_image(base[i], angles[d]);
      for (std::size_t p = 0; p < plane; ++p) ds.inputs[i * plane + p] = to_float_precision(img[p]);
      ds.labels[i] = static_cast<int>(i % static_cast<std::size_t>(n_classes));
    }
    ds.meta = {{"generator", "rotated"}, {"angle", angles[d]}, {"seed", seed}};
    out.push_back(std::move(ds));
  }
  return out;
}

std::vector<DomainDataset> make_category_shift_split(const std::vector<DomainDataset>& datasets,
                                                     const ClassAssignment& assignment) {
  if (datasets.empty()) throw std::invalid_argument("make_category_shift_split: no datasets");
  const int k = datasets.front().n_classes;
  std::map<int, int> owners;  // class -> number of domains that claim it
  for (const auto& [dom, classes] : assignment)
    for (int c : classes) {
      if (c < 0 || c >= k) throw std::invalid_argument("make_category_shift_split: class out of range");
      ++owners[c];
    }
  const bool every_domain_all = std::all_of(assignment.begin(), assignment.end(),
                                            [k](const auto& kv) { return static_cast<int>(kv.second.size()) == k; });
  if (!every_domain_all) {
    for (const auto& [c, n] : owners)
      if (n > 1) throw std::invalid_argument("make_category_shift_split: overlapping class assignment");
  }
  if (static_cast<int>(owners.size()) != k)
    throw std::invalid_argument("make_category_shift_split: assignment does not cover all classes");

  std::vector<DomainDataset> out;
  for (const auto& ds : datasets) {
    auto it = assignment.find(ds.domain_id);
    if (it == assignment.end()) {
      out.push_back(ds);  // target: full label space
      continue;
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (it->second.count(ds.labels[i])) keep.push_back(i);
    DomainDataset f = subset(ds, keep);
    f.meta["classes"] = std::vector<int>(it->second.begin(), it->second.end());
    out.push_back(std::move(f));
  }
  return out;
}

SubpopulationSplit make_subpopulation_domains(std::uint64_t seed, int n_super, int subs_per_super,
                                              std::size_t n_per_sub, std::size_t image_size) {
  if (subs_per_super < 2) throw std::invalid_argument("make_subpopulation_domains: subs_per_super must be >= 2");
  if (subs_per_super % 2 != 0) throw std::invalid_argument("make_subpopulation_domains: subs_per_super must be even");
  if (n_super < 2) throw std::invalid_argument("make_subpopulation_domains: n_super must be >= 2");
  const int half = subs_per_super / 2;
  auto build = [&](int v_begin, int v_end, int domain_id) {
    DomainDataset ds;
    ds.domain_id = domain_id;
    ds.n_classes = n_super;
    const std::size_t n = n_per_sub * static_cast<std::size_t>(n_super) * static_cast<std::size_t>(v_end - v_begin);
    const std::size_t plane = image_size * image_size;
    ds.inputs = Tensor({n, 1, image_size, image_size});
    std::size_t i = 0;
    for (std::size_t k = 0; k < n_per_sub; ++k)
      for (int v = v_begin; v < v_end; ++v)
        for (int s = 0; s < n_super; ++s) {
          Rng rng = sample_rng(seed, 2, static_cast<std::uint64_t>(s * 64 + v), k);
          const double thickness = (v % 2 == 0) ? 0.8 : 1.4;
          Tensor img = render(subpopulation_strokes(seed, s, v), rng, image_size, thickness);
          std::copy(img.data(), img.data() + plane, ds.inputs.data() + i * plane);
          ds.labels.push_back(s);
          ds.groups.push_back(v);
          ++i;
        }
    std::vector<int> variants;
    for (int v = v_begin; v < v_end; ++v) variants.push_back(v);
    ds.meta = {{"generator", "subpopulation"}, {"seed", seed}, {"variants", variants}};
    return ds;
  };
  return {build(0, half, 0), build(half, subs_per_super, 1)};
}

std::vector<DomainDataset> split_by_group(const DomainDataset& ds) {
  std::map<int, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < ds.size(); ++i) by[ds.groups.at(i)].push_back(i);
  std::vector<DomainDataset> out;
  int id = 0;
  for (const auto& [g, idx] : by) {
    DomainDataset part = subset(ds, idx);
    part.domain_id = id++;
    part.meta["group"] = g;
    out.push_back(std::move(part));
  }
  return out;
}

DomainDataset subset(const DomainDataset& ds, const std::vector<std::size_t>& indices) {
  DomainDataset out;
  out.domain_id = ds.domain_id;
  out.n_classes = ds.n_classes;
  out.meta = ds.meta;
  Shape s = ds.inputs.shape();
  const std::size_t plane = ds.inputs.size() / std::max<std::size_t>(s[0], 1);
  s[0] = indices.size();
  out.inputs = Tensor(s);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    std::copy(ds.inputs.data() + i * plane, ds.inputs.data() + (i + 1) * plane, out.inputs.data() + j * plane);
    out.labels.push_back(ds.labels.at(i));
    out.groups.push_back(ds.groups.empty() ? -1 : ds.groups.at(i));
  }
  return out;
}

std::pair<DomainDataset, DomainDataset> holdout_split(const DomainDataset& ds, double fraction,
                                                      std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw std::invalid_argument("holdout_split: fraction must be in [0,1)");
  Rng rng(derive_seed(seed, 9000 + static_cast<std::uint64_t>(ds.domain_id)));
  auto perm = rng.permutation(ds.size());
  const auto n_hold = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> hold(perm.begin(), perm.begin() + static_cast<long>(n_hold));
  std::vector<std::size_t> keep(perm.begin() + static_cast<long>(n_hold), perm.end());
  std::sort(hold.begin(), hold.end());
  std::sort(keep.begin(), keep.end());
  return {subset(ds, keep), subset(ds, hold)};
}

DomainStream stream(const std::vector<DomainDataset>& datasets, std::size_t batch_size, OrderPolicy policy,
                    std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("stream: batch_size must be >= 1");
  DomainStream out;
  out.policy = policy;
  out.batch_size = batch_size;
  out.seed = seed;
  using Ref = std::pair<std::size_t, std::size_t>;  // (dataset, sample)
  auto emit = [&](const std::vector<Ref>& refs) {
    for (std::size_t b = 0; b < refs.size(); b += batch_size) {
      const std::size_t e = std::min(refs.size(), b + batch_size);
      const Tensor& first = datasets[refs[b].first].inputs;
      Shape s = first.shape();
      const std::size_t plane = first.size() / s[0];
      s[0] = e - b;
      DomainBatch batch;
      batch.inputs = Tensor(s);
      for (std::size_t j = b; j < e; ++j) {
        const auto& ds = datasets[refs[j].first];
        const std::size_t i = refs[j].second;
        std::copy(ds.inputs.data() + i * plane, ds.inputs.data() + (i + 1) * plane,
                  batch.inputs.data() + (j - b) * plane);
        batch.labels.push_back(ds.labels[i]);
        batch.domain_ids.push_back(ds.domain_id);
      }
      out.batches.push_back(std::move(batch));
    }
  };
  if (policy == OrderPolicy::single_domain) {
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      Rng rng(derive_seed(seed, 100 + d));
      std::vector<Ref> refs;
      for (std::size_t i : rng.permutation(datasets[d].size())) refs.emplace_back(d, i);
      emit(refs);
    }
  } else {
    Rng rng(derive_seed(seed, 99));
    std::vector<Ref> refs;
    for (std::size_t d = 0; d < datasets.size(); ++d)
      for (std::size_t i = 0; i < datasets[d].size(); ++i) refs.emplace_back(d, i);
    rng.shuffle(refs);
    emit(refs);
  }
  return out;
}

void export_datasets(const std::filesystem::path& dir, const std::vector<DomainDataset>& datasets,
                     const nlohmann::json& generator_args) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"format_version", 1}, {"generator_args", generator_args}};
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const auto& ds = datasets[d];
    const std::string stem = "domain_" + std::to_string(d);
    {
      std::ofstream os(dir / (stem + "_inputs.f32"), std::ios::binary);
      for (double v : ds.inputs.values()) {
        const float f = static_cast<float>(v);
        write_le_bytes(os, &f, sizeof f);
      }
    }
    {
      std::ofstream os(dir / (stem + "_labels.i32"), std::ios::binary);
      for (int l : ds.labels) {
        const std::int32_t v = l;
        write_le_bytes(os, &v, sizeof v);
      }
    }
    {
      std::ofstream os(dir / (stem + "_groups.i32"), std::ios::binary);
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::int32_t v = ds.groups.empty() ? -1 : ds.groups[i];
        write_le_bytes(os, &v, sizeof v);
      }
    }
    entries.push_back({{"domain_id", ds.domain_id},
                       {"shape", ds.inputs.shape()},
                       {"n_classes", ds.n_classes},
                       {"inputs", stem + "_inputs.f32"},
                       {"labels", stem + "_labels.i32"},
                       {"groups", stem + "_groups.i32"},
                       {"meta", ds.meta}});
  }
  manifest["datasets"] = entries;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<DomainDataset> import_datasets(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("missing dataset manifest in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(is);
  if (manifest.at("format_version").get<int>() != 1)
    throw std::runtime_error("unsupported dataset format version");
  std::vector<DomainDataset> out;
  for (const auto& e : manifest.at("datasets")) {
    DomainDataset ds;
    ds.domain_id = e.at("domain_id").get<int>();
    ds.n_classes = e.at("n_classes").get<int>();
    ds.meta = e.at("meta");
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t n = shape.at(0);
    auto raw = read_raw<float>(dir / e.at("inputs").get<std::string>(), numel(shape));
    ds.inputs = Tensor(shape, std::vector<double>(raw.begin(), raw.end()));
    auto labels = read_raw<std::int32_t>(dir / e.at("labels").get<std::string>(), n);
    ds.labels.assign(labels.begin(), labels.end());
    auto groups = read_raw<std::int32_t>(dir / e.at("groups").get<std::string>(), n);
    ds.groups.assign(groups.begin(), groups.end());
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace ttg::data
