#include "relush/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace relush {

namespace {

std::string resolve_path(const std::string& base_dir, const std::string& path) {
  namespace fs = std::filesystem;
  if (base_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).string();
}

std::vector<std::uint8_t> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void check_labels(const Dataset& d, const std::string& what) {
  for (int l : d.labels) {
    if (l < 0 || l >= d.classes) {
      throw FormatError(what + ": label " + std::to_string(l) +
                        " out of range [0," + std::to_string(d.classes) + ")");
    }
  }
}

}  // namespace

Tensor Dataset::batch(std::span<const std::int64_t> indices) const {
  const std::int64_t len = example_len();
  std::vector<double> values(static_cast<std::size_t>(indices.size()) *
                             static_cast<std::size_t>(len));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto img = image(indices[i]);
    for (std::int64_t j = 0; j < len; ++j) {
      values[i * static_cast<std::size_t>(len) + static_cast<std::size_t>(j)] =
          img[static_cast<std::size_t>(j)];
    }
  }
  return Tensor::from_data(
      {static_cast<int>(indices.size()), channels, height, width},
      std::move(values));
}

Tensor Dataset::one(std::int64_t index) const {
  const std::int64_t idx[1] = {index};
  return batch(std::span<const std::int64_t>(idx, 1));
}

void Dataset::truncate(std::int64_t n) {
  if (n <= 0 || n >= size()) return;
  labels.resize(static_cast<std::size_t>(n));
  pixels.resize(static_cast<std::size_t>(n * example_len()));
}

Dataset make_synthetic_split(const SyntheticSpec& spec, bool test_split) {
  Dataset d;
  d.channels = spec.channels;
  d.height = spec.height;
  d.width = spec.width;
  d.classes = spec.classes;

  // class mean patterns: a dim floor plus two smooth bumps per channel
  struct Bump {
    double cy, cx, amp, sigma;
  };
  std::vector<std::vector<Bump>> bumps(
      static_cast<std::size_t>(spec.classes) * spec.channels);
  Rng pattern_rng(spec.seed);
  for (auto& channel_bumps : bumps) {
    for (int b = 0; b < 2; ++b) {
      Bump bump;
      bump.cy = pattern_rng.uniform(0.15, 0.85) * spec.height;
      bump.cx = pattern_rng.uniform(0.15, 0.85) * spec.width;
      bump.amp = pattern_rng.uniform(0.45, 0.85);
      bump.sigma = pattern_rng.uniform(0.12, 0.28) *
                   std::max(spec.height, spec.width);
      channel_bumps.push_back(bump);
    }
  }
  auto mean_at = [&](int cls, int ch, int y, int x) {
    double v = 0.1;
    for (const Bump& b :
         bumps[static_cast<std::size_t>(cls) * spec.channels + ch]) {
      const double dy = y - b.cy, dx = x - b.cx;
      v += b.amp * std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma));
    }
    return std::clamp(v, 0.0, 1.0);
  };

  const int n = test_split ? spec.test_size : spec.train_size;
  Rng sample_rng(spec.seed ^ (test_split ? 0xec5f2a91d3c1a001ULL
                                         : 0x5ab61e3c0fd9b2f3ULL));
  d.labels.resize(static_cast<std::size_t>(n));
  d.pixels.resize(static_cast<std::size_t>(n) * d.example_len());
  std::size_t cursor = 0;
  for (int i = 0; i < n; ++i) {
    const int cls = i % spec.classes;
    d.labels[static_cast<std::size_t>(i)] = cls;
    for (int ch = 0; ch < spec.channels; ++ch) {
      for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
          const double v =
              mean_at(cls, ch, y, x) + spec.noise_sigma * sample_rng.normal();
          d.pixels[cursor++] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return d;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int classes) {
  const auto img = read_binary(images_path);
  if (img.size() < 16) throw FormatError(images_path + ": truncated IDX header");
  if (be32(img.data()) != 0x00000803u) {
    throw FormatError(images_path + ": bad IDX image magic");
  }
  const std::int64_t count = be32(img.data() + 4);
  const int rows = static_cast<int>(be32(img.data() + 8));
  const int cols = static_cast<int>(be32(img.data() + 12));
  const std::int64_t expected = 16 + count * rows * cols;
  if (static_cast<std::int64_t>(img.size()) != expected) {
    throw FormatError(images_path + ": truncated IDX image data");
  }

  const auto lbl = read_binary(labels_path);
  if (lbl.size() < 8) throw FormatError(labels_path + ": truncated IDX header");
  if (be32(lbl.data()) != 0x00000801u) {
    throw FormatError(labels_path + ": bad IDX label magic");
  }
  if (static_cast<std::int64_t>(be32(lbl.data() + 4)) != count ||
      static_cast<std::int64_t>(lbl.size()) != 8 + count) {
    throw FormatError(labels_path + ": label count mismatch");
  }

  Dataset d;
  d.channels = 1;
  d.height = rows;
  d.width = cols;
  d.classes = classes;
  d.labels.resize(static_cast<std::size_t>(count));
  d.pixels.resize(static_cast<std::size_t>(count) * rows * cols);
  for (std::int64_t i = 0; i < count; ++i) {
    d.labels[static_cast<std::size_t>(i)] = lbl[static_cast<std::size_t>(8 + i)];
    const std::uint8_t* src = img.data() + 16 + i * rows * cols;
    float* dst = d.pixels.data() + i * rows * cols;
    for (int p = 0; p < rows * cols; ++p) {
      dst[p] = static_cast<float>(src[p]) / 255.0f;
    }
  }
  check_labels(d, labels_path);
  return d;
}

Dataset load_cifar10(const std::vector<std::string>& files) {
  constexpr std::int64_t kRecord = 1 + 3 * 32 * 32;
  Dataset d;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  d.classes = 10;
  for (const std::string& path : files) {
    const auto raw = read_binary(path);
    if (raw.empty() || raw.size() % kRecord != 0) {
      throw FormatError(path + ": size is not a multiple of the 3073-byte record");
    }
    const std::int64_t count = static_cast<std::int64_t>(raw.size()) / kRecord;
    for (std::int64_t i = 0; i < count; ++i) {
      const std::uint8_t* rec = raw.data() + i * kRecord;
      d.labels.push_back(rec[0]);
      for (std::int64_t p = 0; p < kRecord - 1; ++p) {
        d.pixels.push_back(static_cast<float>(rec[1 + p]) / 255.0f);
      }
    }
  }
  check_labels(d, "cifar10");
  return d;
}

Dataset load_csv(const std::string& path, int channels, int height, int width,
                 int classes) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  Dataset d;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.classes = classes;
  const std::int64_t len = d.example_len();
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    if (!std::getline(row, cell, ',')) continue;
    try {
      d.labels.push_back(std::stoi(cell));
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": bad label");
    }
    std::int64_t got = 0;
    while (std::getline(row, cell, ',')) {
      try {
        d.pixels.push_back(std::stof(cell));
      } catch (const std::exception&) {
        throw FormatError(path + ":" + std::to_string(line_no) + ": bad pixel");
      }
      ++got;
    }
    if (got != len) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(len) + " pixels, got " +
                        std::to_string(got));
    }
  }
  if (d.labels.empty()) throw FormatError(path + ": no examples");
  check_labels(d, path);
  return d;
}

std::string dataset_to_csv(const Dataset& data) {
  std::string out;
  char buf[48];
  const std::int64_t len = data.example_len();
  for (std::int64_t i = 0; i < data.size(); ++i) {
    out += std::to_string(data.labels[static_cast<std::size_t>(i)]);
    const auto img = data.image(i);
    for (std::int64_t p = 0; p < len; ++p) {
      std::snprintf(buf, sizeof(buf), ",%.9g",
                    static_cast<double>(img[static_cast<std::size_t>(p)]));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

DatasetPair load_dataset(const DatasetConfig& cfg, const std::string& base_dir,
                         int channels, int height, int width, int classes,
                         std::int64_t limit) {
  DatasetPair pair;
  if (cfg.kind == "synthetic") {
    pair.train = make_synthetic_split(cfg.synthetic, false);
    pair.test = make_synthetic_split(cfg.synthetic, true);
  } else if (cfg.kind == "csv") {
    pair.train = load_csv(resolve_path(base_dir, cfg.train_csv), channels,
                          height, width, classes);
    pair.test = load_csv(resolve_path(base_dir, cfg.test_csv), channels, height,
                         width, classes);
  } else if (cfg.kind == "idx") {
    pair.train = load_idx(resolve_path(base_dir, cfg.train_images),
                          resolve_path(base_dir, cfg.train_labels), classes);
    pair.test = load_idx(resolve_path(base_dir, cfg.test_images),
                         resolve_path(base_dir, cfg.test_labels), classes);
  } else if (cfg.kind == "cifar10") {
    std::vector<std::string> train, test;
    for (const auto& f : cfg.train_files) train.push_back(resolve_path(base_dir, f));
    for (const auto& f : cfg.test_files) test.push_back(resolve_path(base_dir, f));
    pair.train = load_cifar10(train);
    pair.test = load_cifar10(test);
  } else {
    throw FormatError("unknown dataset kind '" + cfg.kind + "'");
  }
  for (const Dataset* split : {&pair.train, &pair.test}) {
    if (split->channels != channels || split->height != height ||
        split->width != width) {
      throw FormatError("dataset geometry " + std::to_string(split->channels) +
                        "x" + std::to_string(split->height) + "x" +
                        std::to_string(split->width) +
                        " does not match the network input " +
                        std::to_string(channels) + "x" + std::to_string(height) +
                        "x" + std::to_string(width));
    }
  }
  if (limit > 0) {
    pair.train.truncate(limit);
    pair.test.truncate(limit);
  }
  return pair;
}

}  // namespace relush
