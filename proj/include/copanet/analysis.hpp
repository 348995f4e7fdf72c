#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "copanet/data.hpp"
#include "copanet/errors.hpp"
#include "copanet/keyvalue.hpp"
#include "copanet/model.hpp"
#include "copanet/ops.hpp"

namespace copanet {

/// Win counts per (unit, feature map, category, pathway), aggregated over
/// spatial positions and samples.
struct RoutingProfile {
  std::size_t pathways = 2;
  std::vector<int> unit_ids;  // model unit id of each row
  std::size_t maps = 0;
  std::vector<std::string> categories;
  std::vector<std::uint64_t> wins;

  RoutingProfile() = default;
  RoutingProfile(std::vector<int> units, std::size_t maps_, std::vector<std::string> cats,
                 std::size_t k)
      : pathways(k), unit_ids(std::move(units)), maps(maps_), categories(std::move(cats)) {
    if (pathways < 2) throw ConfigError("a routing profile needs at least two pathways");
    wins.assign(unit_ids.size() * maps * categories.size() * pathways, 0);
  }

  std::size_t units() const { return unit_ids.size(); }

  std::size_t index(std::size_t u, std::size_t m, std::size_t c, std::size_t k = 0) const {
    return ((u * maps + m) * categories.size() + c) * pathways + k;
  }
  std::uint64_t& win(std::size_t u, std::size_t m, std::size_t c, std::size_t k) {
    return wins[index(u, m, c, k)];
  }
  std::uint64_t win(std::size_t u, std::size_t m, std::size_t c, std::size_t k) const {
    return wins[index(u, m, c, k)];
  }
  std::uint64_t total(std::size_t u, std::size_t m, std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t k = 0; k < pathways; ++k) t += win(u, m, c, k);
    return t;
  }
  double fraction(std::size_t u, std::size_t m, std::size_t c, std::size_t k) const {
    const auto t = total(u, m, c);
    if (t == 0) throw UsageError("profile cell has no samples");
    return static_cast<double>(win(u, m, c, k)) / static_cast<double>(t);
  }
  /// 2 * (pathway-0 win fraction) - 1; defined for two pathways.
  double preference(std::size_t u, std::size_t m, std::size_t c) const {
    if (pathways != 2) {
      throw UsageError("preference is defined for 2 pathways; use fraction() for " +
                       std::to_string(pathways));
    }
    return 2.0 * fraction(u, m, c, 0) - 1.0;
  }

  std::size_t category_index(const std::string& name) const {
    const auto it = std::find(categories.begin(), categories.end(), name);
    if (it == categories.end()) {
      throw UsageError("unknown category '" + name + "'; profile has " + join_keys(categories));
    }
    return static_cast<std::size_t>(it - categories.begin());
  }

  /// Adds one captured mask (N x maps x H x W) for row `u`; `labels` holds
  /// the category of each sample.
  void accumulate(std::size_t u, const RoutingMask& mask, std::span<const int> labels) {
    if (mask.shape.size() != 4 || mask.shape[1] != maps || mask.pathways != pathways ||
        mask.shape[0] != labels.size()) {
      throw UsageError("mask " + to_string(mask.shape) + " does not fit a profile of " +
                       std::to_string(maps) + " maps for " + std::to_string(labels.size()) +
                       " samples");
    }
    const std::size_t plane = mask.shape[2] * mask.shape[3];
    for (std::size_t n = 0; n < labels.size(); ++n) {
      const auto c = static_cast<std::size_t>(labels[n]);
      if (c >= categories.size()) throw UsageError("sample category outside profile");
      for (std::size_t m = 0; m < maps; ++m) {
        const std::uint8_t* w = mask.winners.data() + (n * maps + m) * plane;
        std::uint64_t* cell = &wins[index(u, m, c)];
        for (std::size_t i = 0; i < plane; ++i) ++cell[w[i]];
      }
    }
  }

  void merge(const RoutingProfile& other) {
    if (other.unit_ids != unit_ids || other.maps != maps || other.categories != categories ||
        other.pathways != pathways) {
      throw UsageError("cannot merge profiles of different layout");
    }
    for (std::size_t i = 0; i < wins.size(); ++i) wins[i] += other.wins[i];
  }

  bool operator==(const RoutingProfile&) const = default;
};

/// Streams `ds` through `model` in eval mode, capturing routing at stage
/// `stage` (0-based). Category of each record is its dataset label.
template <typename T>
RoutingProfile trace(Model<T>& model, const Dataset& ds, const Normalizer& normalizer,
                     std::size_t stage, std::size_t batch_size = 64) {
  const auto& config = model.config();
  if (config.k < 2) {
    throw ConfigError("routing capture needs k >= 2; this model has k = " +
                      std::to_string(config.k));
  }
  if (stage >= kStages) {
    throw UsageError("stage " + std::to_string(stage) + " outside 0.." +
                     std::to_string(kStages - 1));
  }
  std::vector<int> ids;
  for (const auto& unit : model.stage(stage)) ids.push_back(unit.id());
  RoutingProfile profile(ids, config.stage_widths()[stage], ds.class_names, config.k);
  NoGradGuard no_grad;
  for (const auto& idx : make_batches(ds.size(), batch_size, nullptr)) {
    auto batch = make_batch<T>(ds, idx, normalizer);
    typename Model<T>::ForwardOptions opt;
    opt.capture_stage = stage;
    auto out = model.forward(batch.images, opt);
    for (std::size_t u = 0; u < out.routing.size(); ++u) {
      profile.accumulate(u, out.routing[u], batch.labels);
    }
  }
  return profile;
}

/// Mean absolute preference difference over all (unit, map) cells. With
/// more than two pathways, the per-cell term is the total variation
/// distance between the win-fraction vectors.
inline double profile_distance(const RoutingProfile& p, const std::string& a,
                               const std::string& b) {
  const std::size_t ca = p.category_index(a), cb = p.category_index(b);
  double sum = 0;
  for (std::size_t u = 0; u < p.units(); ++u) {
    for (std::size_t m = 0; m < p.maps; ++m) {
      if (p.pathways == 2) {
        sum += std::abs(p.preference(u, m, ca) - p.preference(u, m, cb));
      } else {
        double tv = 0;
        for (std::size_t k = 0; k < p.pathways; ++k) {
          tv += std::abs(p.fraction(u, m, ca, k) - p.fraction(u, m, cb, k));
        }
        sum += tv / 2;
      }
    }
  }
  return sum / static_cast<double>(p.units() * p.maps);
}

struct SplitHalfDistances {
  double within = 0;   // mean over classes of d(class/a, class/b)
  double between = 0;  // mean over ordered class pairs of d(c/a, c'/b)
};

/// Splits each class's records at random into halves a and b, traces them as
/// separate categories and compares same-class against cross-class distances
/// on equal-size halves.
template <typename T>
SplitHalfDistances split_half_distances(Model<T>& model, const Dataset& ds,
                                        const Normalizer& normalizer, std::size_t stage,
                                        std::uint64_t seed) {
  const std::size_t classes = ds.num_classes();
  Dataset halves = ds;
  halves.class_names.clear();
  for (const auto& name : ds.class_names) {
    halves.class_names.push_back(name + "/a");
    halves.class_names.push_back(name + "/b");
  }
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < classes; ++c) {
    auto idx = ds.indices_of(static_cast<int>(c));
    if (idx.size() < 2) throw DataError("class " + ds.class_names[c] + " has fewer than 2 records");
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      halves.labels[idx[j]] = static_cast<int>(2 * c + (j < idx.size() / 2 ? 0 : 1));
    }
  }
  const auto profile = trace(model, halves, normalizer, stage);
  SplitHalfDistances out;
  std::size_t pairs = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const auto& a = halves.class_names[2 * c];
    out.within += profile_distance(profile, a, halves.class_names[2 * c + 1]);
    for (std::size_t d = 0; d < classes; ++d) {
      if (d == c) continue;
      out.between += profile_distance(profile, a, halves.class_names[2 * d + 1]);
      ++pairs;
    }
  }
  out.within /= static_cast<double>(classes);
  out.between /= static_cast<double>(pairs);
  return out;
}

inline std::string profile_csv(const RoutingProfile& p) {
  std::ostringstream out;
  out << "unit,map,category";
  for (std::size_t k = 0; k < p.pathways; ++k) out << ",wins_p" << k;
  out << ",total,preference\n" << std::setprecision(17);
  for (std::size_t u = 0; u < p.units(); ++u) {
    for (std::size_t m = 0; m < p.maps; ++m) {
      for (std::size_t c = 0; c < p.categories.size(); ++c) {
        out << p.unit_ids[u] << ',' << m << ',' << p.categories[c];
        for (std::size_t k = 0; k < p.pathways; ++k) out << ',' << p.win(u, m, c, k);
        const auto t = p.total(u, m, c);
        out << ',' << t << ',';
        if (p.pathways == 2 && t > 0) out << p.preference(u, m, c);
        out << '\n';
      }
    }
  }
  return out.str();
}

/// Inverse of profile_csv. Units and categories take first-appearance order.
inline RoutingProfile parse_profile_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty profile CSV");
  const auto header = split_list(line);
  if (header.size() < 6 || header[0] != "unit" || header[1] != "map" ||
      header[2] != "category" || header[header.size() - 2] != "total" ||
      header.back() != "preference") {
    throw DataError("unexpected profile CSV header: " + line);
  }
  const std::size_t k = header.size() - 5;
  struct Row {
    int unit;
    std::size_t map;
    std::string category;
    std::vector<std::uint64_t> wins;
  };
  std::vector<Row> rows;
  std::vector<int> units;
  std::vector<std::string> categories;
  std::size_t maps = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != header.size()) throw DataError("malformed profile CSV row: " + line);
    Row r{parse_integer<int>("unit", cells[0]), parse_integer<std::size_t>("map", cells[1]),
          cells[2], {}};
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < k; ++j) {
      r.wins.push_back(parse_integer<std::uint64_t>("wins", cells[3 + j]));
      t += r.wins.back();
    }
    if (parse_integer<std::uint64_t>("total", cells[3 + k]) != t) {
      throw DataError("profile CSV row total disagrees with wins: " + line);
    }
    if (std::find(units.begin(), units.end(), r.unit) == units.end()) units.push_back(r.unit);
    if (std::find(categories.begin(), categories.end(), r.category) == categories.end()) {
      categories.push_back(r.category);
    }
    maps = std::max(maps, r.map + 1);
    rows.push_back(std::move(r));
  }
  RoutingProfile p(units, maps, categories, k);
  for (const auto& r : rows) {
    const auto u = static_cast<std::size_t>(
        std::find(units.begin(), units.end(), r.unit) - units.begin());
    const auto c = p.category_index(r.category);
    for (std::size_t j = 0; j < k; ++j) p.win(u, r.map, c, j) = r.wins[j];
  }
  return p;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

/// Binary PGM (P5), row-major bytes.
inline std::string encode_pgm(std::size_t width, std::size_t height,
                              const std::vector<std::uint8_t>& pixels) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

/// -1 -> 0, 0 -> 128, +1 -> 255; |p| < 0.1 renders as the neutral 128.
inline std::uint8_t preference_gray(double p) {
  if (std::abs(p) < 0.1) return 128;
  return static_cast<std::uint8_t>(std::clamp(std::lround(127.5 * (p + 1.0)), 0L, 255L));
}

/// Heatmap of one feature map: rows are units, columns categories.
inline std::vector<std::uint8_t> preference_heatmap(const RoutingProfile& p, std::size_t map) {
  std::vector<std::uint8_t> pixels;
  pixels.reserve(p.units() * p.categories.size());
  for (std::size_t u = 0; u < p.units(); ++u) {
    for (std::size_t c = 0; c < p.categories.size(); ++c) {
      pixels.push_back(preference_gray(p.preference(u, map, c)));
    }
  }
  return pixels;
}

/// Feature maps ordered by between-category variance of preference,
/// averaged over units; most category-dependent first.
inline std::vector<std::size_t> rank_maps(const RoutingProfile& p) {
  std::vector<double> score(p.maps, 0.0);
  const auto cats = static_cast<double>(p.categories.size());
  for (std::size_t m = 0; m < p.maps; ++m) {
    for (std::size_t u = 0; u < p.units(); ++u) {
      double mean = 0, sq = 0;
      for (std::size_t c = 0; c < p.categories.size(); ++c) {
        const double v = p.preference(u, m, c);
        mean += v;
        sq += v * v;
      }
      mean /= cats;
      score[m] += sq / cats - mean * mean;
    }
  }
  std::vector<std::size_t> order(p.maps);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

/// Writes profile.csv plus map_<c>.pgm for the `top` highest-ranked maps.
inline std::vector<std::filesystem::path> export_profile(const RoutingProfile& p,
                                                         const std::filesystem::path& dir,
                                                         std::size_t top) {
  std::vector<std::filesystem::path> written;
  written.push_back(dir / "profile.csv");
  write_text(written.back(), profile_csv(p));
  if (p.pathways != 2) return written;
  const auto order = rank_maps(p);
  for (std::size_t i = 0; i < std::min(top, order.size()); ++i) {
    written.push_back(dir / ("map_" + std::to_string(order[i]) + ".pgm"));
    write_text(written.back(),
               encode_pgm(p.categories.size(), p.units(), preference_heatmap(p, order[i])));
  }
  return written;
}

/// L1 norms of classifier weight slices, one slice per source block.
struct ReuseReport {
  std::vector<std::string> blocks;
  std::vector<std::size_t> block_channels;
  std::size_t classes = 0;
  std::vector<double> norms;  // [block][class]
  std::vector<double> block_totals;

  double norm(std::size_t block, std::size_t cls) const { return norms[block * classes + cls]; }
};

template <typename T>
ReuseReport reuse_report(const Model<T>& model) {
  if (model.config().variant != Variant::cross_block) {
    throw ConfigError("reuse report needs the R variant; the plain model has no "
                      "cross-block classifier features");
  }
  ReuseReport r;
  r.block_channels = model.classifier_layout();
  r.classes = model.config().num_classes;
  const auto& w = model.classifier_weight();  // features x classes
  std::size_t offset = 0;
  for (std::size_t b = 0; b < r.block_channels.size(); ++b) {
    r.blocks.push_back("block" + std::to_string(b + 1));
    double block_total = 0;
    for (std::size_t cls = 0; cls < r.classes; ++cls) {
      double sum = 0;
      for (std::size_t f = offset; f < offset + r.block_channels[b]; ++f) {
        sum += std::abs(static_cast<double>(w[f * r.classes + cls]));
      }
      r.norms.push_back(sum);
      block_total += sum;
    }
    r.block_totals.push_back(block_total);
    offset += r.block_channels[b];
  }
  return r;
}

inline std::string reuse_csv(const ReuseReport& r) {
  std::ostringstream out;
  out << "block,channels,class,l1_norm\n" << std::setprecision(17);
  for (std::size_t b = 0; b < r.blocks.size(); ++b) {
    for (std::size_t c = 0; c < r.classes; ++c) {
      out << r.blocks[b] << ',' << r.block_channels[b] << ',' << c << ',' << r.norm(b, c) << '\n';
    }
    out << r.blocks[b] << ',' << r.block_channels[b] << ",total," << r.block_totals[b] << '\n';
  }
  return out.str();
}

/// Rows are blocks, columns classes; gray level scales with the norm
/// relative to the largest one.
inline std::vector<std::uint8_t> reuse_heatmap(const ReuseReport& r) {
  const double top = r.norms.empty() ? 0.0 : *std::max_element(r.norms.begin(), r.norms.end());
  std::vector<std::uint8_t> pixels;
  for (double v : r.norms) {
    pixels.push_back(top > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * v / top)) : 0);
  }
  return pixels;
}

inline std::vector<std::filesystem::path> export_reuse(const ReuseReport& r,
                                                       const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written{dir / "reuse.csv", dir / "reuse.pgm"};
  write_text(written[0], reuse_csv(r));
  write_text(written[1], encode_pgm(r.classes, r.blocks.size(), reuse_heatmap(r)));
  return written;
}

}  // namespace copanet
