#include "relush/grouping.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>
#include <sstream>

#include "relush/pngio.hpp"

namespace relush {

ActivationProfileMatrix::ActivationProfileMatrix(int height, int width,
                                                 std::int64_t n_examples)
    : height_(height), width_(width), n_examples_(n_examples) {
  if (height <= 0 || width <= 0 || n_examples <= 0) {
    throw DimensionError("profile matrix must be non-empty");
  }
  if (height > 0xffff || width > 0xffff || n_examples > 0xffffffffLL) {
    throw DimensionError("profile matrix exceeds header limits");
  }
  words_per_row_ = static_cast<int>((n_examples + 63) / 64);
  bits_.assign(static_cast<std::size_t>(n_positions()) * words_per_row_, 0);
}

bool ActivationProfileMatrix::get(int position, std::int64_t example) const {
  const std::size_t w = static_cast<std::size_t>(position) * words_per_row_ +
                        static_cast<std::size_t>(example >> 6);
  return (bits_[w] >> (example & 63)) & 1u;
}

void ActivationProfileMatrix::set(int position, std::int64_t example,
                                  bool value) {
  const std::size_t w = static_cast<std::size_t>(position) * words_per_row_ +
                        static_cast<std::size_t>(example >> 6);
  const std::uint64_t mask = std::uint64_t{1} << (example & 63);
  if (value) {
    bits_[w] |= mask;
  } else {
    bits_[w] &= ~mask;
  }
}

std::uint32_t ActivationProfileMatrix::row_distance(int a, int b) const {
  const std::uint64_t* ra = bits_.data() + static_cast<std::size_t>(a) * words_per_row_;
  const std::uint64_t* rb = bits_.data() + static_cast<std::size_t>(b) * words_per_row_;
  std::uint32_t d = 0;
  for (int w = 0; w < words_per_row_; ++w) {
    d += static_cast<std::uint32_t>(std::popcount(ra[w] ^ rb[w]));
  }
  return d;
}

std::vector<std::uint8_t> ActivationProfileMatrix::to_bytes() const {
  std::vector<std::uint8_t> out;
  auto put_u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  put_u16(static_cast<std::uint16_t>(height_));
  put_u16(static_cast<std::uint16_t>(width_));
  const std::uint32_t n = static_cast<std::uint32_t>(n_examples_);
  out.push_back(static_cast<std::uint8_t>(n));
  out.push_back(static_cast<std::uint8_t>(n >> 8));
  out.push_back(static_cast<std::uint8_t>(n >> 16));
  out.push_back(static_cast<std::uint8_t>(n >> 24));
  const std::int64_t row_bytes = (n_examples_ + 7) / 8;
  for (int p = 0; p < n_positions(); ++p) {
    for (std::int64_t b = 0; b < row_bytes; ++b) {
      std::uint8_t byte = 0;
      for (int bit = 0; bit < 8; ++bit) {
        const std::int64_t j = b * 8 + bit;
        if (j < n_examples_ && get(p, j)) byte |= static_cast<std::uint8_t>(1u << bit);
      }
      out.push_back(byte);
    }
  }
  return out;
}

ActivationProfileMatrix ActivationProfileMatrix::from_bytes(
    const std::vector<std::uint8_t>& raw) {
  if (raw.size() < 8) throw FormatError("profile file shorter than header");
  const int h = raw[0] | (raw[1] << 8);
  const int w = raw[2] | (raw[3] << 8);
  const std::int64_t n = static_cast<std::int64_t>(raw[4]) |
                         (static_cast<std::int64_t>(raw[5]) << 8) |
                         (static_cast<std::int64_t>(raw[6]) << 16) |
                         (static_cast<std::int64_t>(raw[7]) << 24);
  if (h <= 0 || w <= 0 || n <= 0) throw FormatError("bad profile header");
  const std::int64_t row_bytes = (n + 7) / 8;
  const std::size_t expected =
      8 + static_cast<std::size_t>(h) * w * static_cast<std::size_t>(row_bytes);
  if (raw.size() != expected) {
    throw FormatError("profile file truncated: expected " +
                      std::to_string(expected) + " bytes, got " +
                      std::to_string(raw.size()));
  }
  ActivationProfileMatrix m(h, w, n);
  std::size_t cursor = 8;
  for (int p = 0; p < h * w; ++p) {
    for (std::int64_t b = 0; b < row_bytes; ++b, ++cursor) {
      const std::uint8_t byte = raw[cursor];
      if (!byte) continue;
      for (int bit = 0; bit < 8; ++bit) {
        const std::int64_t j = b * 8 + bit;
        if (j < n && ((byte >> bit) & 1)) m.set(p, j, true);
      }
    }
  }
  return m;
}

void ActivationProfileMatrix::save(const std::string& path) const {
  const auto bytes = to_bytes();
  write_file_atomic(path,
                    std::string(reinterpret_cast<const char*>(bytes.data()),
                                bytes.size()));
}

ActivationProfileMatrix ActivationProfileMatrix::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return from_bytes(raw);
}

void ClusterMap::validate() const {
  if (height <= 0 || width <= 0 || k <= 0) {
    throw DimensionError("cluster map must be non-empty");
  }
  if (labels.size() != static_cast<std::size_t>(height) * width) {
    throw DimensionError("cluster map label count mismatch");
  }
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (int l : labels) {
    if (l < 0 || l >= k) throw DimensionError("cluster label out of range");
    ++count[static_cast<std::size_t>(l)];
  }
  for (int c : count) {
    if (c == 0) throw DimensionError("cluster map has an empty cluster");
  }
}

void ClusterMap::canonicalize() {
  std::vector<int> remap(static_cast<std::size_t>(k), -1);
  int next = 0;
  for (int& l : labels) {
    if (remap[static_cast<std::size_t>(l)] < 0) remap[static_cast<std::size_t>(l)] = next++;
    l = remap[static_cast<std::size_t>(l)];
  }
  k = next;
}

GroupingSpec uniform_patches(int height, int width, int k) {
  if (k < 1) throw DimensionError("patch size must be >= 1");
  if (k > std::max(height, width)) {
    throw DimensionError("patch size " + std::to_string(k) +
                         " exceeds channel extent " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
  if (k == 1) return GroupingSpec::identity(height, width);
  GroupingSpec spec;
  spec.height = height;
  spec.width = width;
  spec.mode = GateMode::learned;
  const int ty = (height + k - 1) / k;
  const int tx = (width + k - 1) / k;
  for (int gy = 0; gy < ty; ++gy) {
    for (int gx = 0; gx < tx; ++gx) {
      GateGroup g;
      for (int y = gy * k; y < std::min((gy + 1) * k, height); ++y) {
        for (int x = gx * k; x < std::min((gx + 1) * k, width); ++x) {
          g.members.push_back(y * width + x);
        }
      }
      g.weights.assign(g.members.size(), 1.0 / static_cast<double>(g.members.size()));
      spec.groups.push_back(std::move(g));
    }
  }
  return spec;
}

std::vector<std::uint32_t> hamming_distance_matrix(
    const ActivationProfileMatrix& profiles) {
  const int n = profiles.n_positions();
  std::vector<std::uint32_t> d(static_cast<std::size_t>(n) * n, 0);
  for (int p = 0; p < n; ++p) {
    for (int q = p + 1; q < n; ++q) {
      const std::uint32_t dist = profiles.row_distance(p, q);
      d[static_cast<std::size_t>(p) * n + q] = dist;
      d[static_cast<std::size_t>(q) * n + p] = dist;
    }
  }
  return d;
}

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] =
          parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    // deterministic: smaller root wins
    if (b < a) std::swap(a, b);
    parent[static_cast<std::size_t>(b)] = a;
    return true;
  }
};

/// Clusters an arbitrary subset of positions; returns labels aligned with
/// `subset` order, canonical by first occurrence.
std::vector<int> cluster_subset(const ActivationProfileMatrix& profiles,
                                const std::vector<int>& subset, int k,
                                std::vector<std::uint32_t>* merge_distances =
                                    nullptr) {
  const int n = static_cast<int>(subset.size());
  if (k < 1) throw DimensionError("cluster count must be >= 1");
  if (k > n) {
    throw DimensionError("cluster count " + std::to_string(k) +
                         " exceeds position count " + std::to_string(n));
  }
  struct Pair {
    std::uint32_t d;
    int p, q;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int p = 0; p < n; ++p) {
    for (int q = p + 1; q < n; ++q) {
      pairs.push_back(Pair{profiles.row_distance(subset[static_cast<std::size_t>(p)],
                                                 subset[static_cast<std::size_t>(q)]),
                           p, q});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.d != b.d) return a.d < b.d;
    if (a.p != b.p) return a.p < b.p;
    return a.q < b.q;
  });
  UnionFind uf(n);
  int sets = n;
  for (const Pair& pr : pairs) {
    if (sets == k) break;
    if (uf.unite(pr.p, pr.q)) {
      --sets;
      if (merge_distances) merge_distances->push_back(pr.d);
    }
  }
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::vector<int> remap(static_cast<std::size_t>(n), -1);
  int next = 0;
  for (int p = 0; p < n; ++p) {
    const int root = uf.find(p);
    if (remap[static_cast<std::size_t>(root)] < 0) remap[static_cast<std::size_t>(root)] = next++;
    labels[static_cast<std::size_t>(p)] = remap[static_cast<std::size_t>(root)];
  }
  return labels;
}

}  // namespace

ClusterMap agglomerative_cluster(const ActivationProfileMatrix& profiles,
                                 int k,
                                 std::vector<std::uint32_t>* merge_distances) {
  std::vector<int> all(static_cast<std::size_t>(profiles.n_positions()));
  std::iota(all.begin(), all.end(), 0);
  ClusterMap map;
  map.height = profiles.height();
  map.width = profiles.width();
  map.k = k;
  map.labels = cluster_subset(profiles, all, k, merge_distances);
  map.validate();
  return map;
}

GroupingSpec windowed_cluster(const ActivationProfileMatrix& profiles,
                              int window, int k_per_window) {
  const int h = profiles.height(), w = profiles.width();
  if (window < 1) throw DimensionError("window must be >= 1");
  if (k_per_window > window * window) {
    throw DimensionError("k_per_window " + std::to_string(k_per_window) +
                         " exceeds window capacity " +
                         std::to_string(window * window));
  }
  ClusterMap map;
  map.height = h;
  map.width = w;
  map.labels.assign(static_cast<std::size_t>(h) * w, -1);
  int next_label = 0;
  const int ty = (h + window - 1) / window;
  const int tx = (w + window - 1) / window;
  for (int gy = 0; gy < ty; ++gy) {
    for (int gx = 0; gx < tx; ++gx) {
      std::vector<int> subset;
      for (int y = gy * window; y < std::min((gy + 1) * window, h); ++y) {
        for (int x = gx * window; x < std::min((gx + 1) * window, w); ++x) {
          subset.push_back(y * w + x);
        }
      }
      // truncated boundary windows cannot host more clusters than positions
      const int k = std::min<int>(k_per_window, static_cast<int>(subset.size()));
      const std::vector<int> labels = cluster_subset(profiles, subset, k);
      for (std::size_t i = 0; i < subset.size(); ++i) {
        map.labels[static_cast<std::size_t>(subset[i])] = next_label + labels[i];
      }
      next_label += k;
    }
  }
  map.k = next_label;
  map.validate();
  return grouping_from_cluster_map(map);
}

GroupingSpec grouping_from_cluster_map(const ClusterMap& map) {
  map.validate();
  GroupingSpec spec;
  spec.height = map.height;
  spec.width = map.width;
  spec.mode = GateMode::learned;
  spec.groups.resize(static_cast<std::size_t>(map.k));
  for (int p = 0; p < map.height * map.width; ++p) {
    spec.groups[static_cast<std::size_t>(map.labels[static_cast<std::size_t>(p)])]
        .members.push_back(p);
  }
  for (GateGroup& g : spec.groups) {
    g.weights.assign(g.members.size(), 1.0 / static_cast<double>(g.members.size()));
  }
  spec.validate();
  return spec;
}

std::string cluster_map_to_csv(const ClusterMap& map) {
  std::string out;
  for (int y = 0; y < map.height; ++y) {
    if (y) out += '\n';
    for (int x = 0; x < map.width; ++x) {
      if (x) out += ',';
      out += std::to_string(map.labels[static_cast<std::size_t>(y) * map.width + x]);
    }
  }
  return out;
}

ClusterMap cluster_map_from_csv(const std::string& text) {
  ClusterMap map;
  std::istringstream in(text);
  std::string line;
  int width = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    int count = 0;
    while (std::getline(row, cell, ',')) {
      try {
        map.labels.push_back(std::stoi(cell));
      } catch (const std::exception&) {
        throw FormatError("bad cluster map cell '" + cell + "'");
      }
      ++count;
    }
    if (width < 0) {
      width = count;
    } else if (width != count) {
      throw FormatError("ragged cluster map CSV");
    }
    ++map.height;
  }
  map.width = width;
  map.k = map.labels.empty()
              ? 0
              : *std::max_element(map.labels.begin(), map.labels.end()) + 1;
  map.validate();
  return map;
}

ClusterMap load_cluster_map_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return cluster_map_from_csv(text);
}

void export_cluster_map(const ClusterMap& map, const std::string& path_base) {
  map.validate();
  write_file_atomic(path_base + ".csv", cluster_map_to_csv(map));
  if (map.k <= 256) {
    std::vector<Rgb> palette;
    palette.reserve(static_cast<std::size_t>(map.k));
    for (int i = 0; i < map.k; ++i) palette.push_back(palette_color(i));
    std::vector<std::uint8_t> pixels(map.labels.size());
    for (std::size_t i = 0; i < map.labels.size(); ++i) {
      pixels[i] = static_cast<std::uint8_t>(map.labels[i]);
    }
    write_indexed_png(path_base + ".png", map.width, map.height, pixels, palette);
  } else {
    std::vector<Rgb> pixels(map.labels.size());
    for (std::size_t i = 0; i < map.labels.size(); ++i) {
      pixels[i] = palette_color(map.labels[i]);
    }
    write_rgb_png(path_base + ".png", map.width, map.height, pixels);
  }
}

}  // namespace relush
