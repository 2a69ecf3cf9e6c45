#include "fedrank/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "fedrank/errors.hpp"
#include "fedrank/rng.hpp"

namespace fedrank {

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes,
                        std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw ParseError(path.string() + ": truncated header at byte " +
                     std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) |
         (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) |
         std::uint32_t{bytes[offset + 3]};
}

void assign_num_classes(Dataset& ds) {
  int max_label = -1;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = max_label + 1;
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

void Dataset::validate() const {
  if (num_classes < 2) {
    throw InvalidSpec("dataset needs at least 2 classes, got " +
                      std::to_string(num_classes));
  }
  if (features.size() != labels.size() * dims) {
    throw InvalidSpec("feature row count does not match label count");
  }
  std::vector<std::size_t> per_class(static_cast<std::size_t>(num_classes), 0);
  for (int l : labels) {
    if (l < 0 || l >= num_classes) {
      throw InvalidSpec("label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
    ++per_class[static_cast<std::size_t>(l)];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0) {
      throw InvalidSpec("class " + std::to_string(c) + " has no examples");
    }
  }
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) {
    throw InvalidSpec("synthetic dataset needs num_classes >= 2");
  }
  if (spec.dims == 0) throw InvalidSpec("synthetic dataset needs dims >= 1");
  if (spec.samples < static_cast<std::size_t>(spec.num_classes)) {
    throw InvalidSpec("synthetic dataset needs at least one sample per class");
  }
  if (!(spec.cluster_spread >= 0.0)) {
    throw InvalidSpec("cluster_spread must be non-negative");
  }
  const auto classes = static_cast<std::size_t>(spec.num_classes);

  Rng mean_rng(derive_seed(spec.seed, "means"));
  std::vector<double> means(classes * spec.dims);
  for (auto& m : means) m = spec.mean_scale * mean_rng.normal();

  Rng sample_rng(derive_seed(spec.seed, spec.split));
  Dataset ds;
  ds.dims = spec.dims;
  ds.num_classes = spec.num_classes;
  ds.labels.resize(spec.samples);
  ds.features.resize(spec.samples * spec.dims);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const std::size_t c = i % classes;
    ds.labels[i] = static_cast<int>(c);
    for (std::size_t k = 0; k < spec.dims; ++k) {
      ds.features[i * spec.dims + k] =
          means[c * spec.dims + k] + spec.cluster_spread * sample_rng.normal();
    }
  }
  return ds;
}

Dataset read_idx(const std::filesystem::path& images,
                 const std::filesystem::path& labels) {
  const auto img = read_bytes(images);
  const auto lab = read_bytes(labels);

  const std::uint32_t img_magic = read_be32(img, 0, images);
  if (img_magic != 0x00000803u) {
    throw ParseError(images.string() + ": bad magic at byte 0 (expected 0x00000803)");
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels);
  if (lab_magic != 0x00000801u) {
    throw ParseError(labels.string() + ": bad magic at byte 0 (expected 0x00000801)");
  }
  const std::size_t n = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t n_labels = read_be32(lab, 4, labels);
  if (n != n_labels) {
    throw ParseError(labels.string() + ": label count at byte 4 (" +
                     std::to_string(n_labels) + ") differs from image count (" +
                     std::to_string(n) + ")");
  }
  const std::size_t dims = rows * cols;
  const std::size_t img_expected = 16 + n * dims;
  if (img.size() < img_expected) {
    throw ParseError(images.string() + ": truncated pixel data at byte " +
                     std::to_string(img.size()) + " (expected " +
                     std::to_string(img_expected) + " bytes)");
  }
  if (lab.size() < 8 + n) {
    throw ParseError(labels.string() + ": truncated label data at byte " +
                     std::to_string(lab.size()));
  }

  Dataset ds;
  ds.dims = dims;
  ds.features.resize(n * dims);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n * dims; ++i) {
    ds.features[i] = static_cast<double>(img[16 + i]) / 255.0;
  }
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = lab[8 + i];
  assign_num_classes(ds);
  ds.validate();
  return ds;
}

Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) {
    throw ParseError(path.string() + ":1: missing header row");
  }
  const auto header = split_csv_line(line);
  const auto label_it = std::find(header.begin(), header.end(), "label");
  if (label_it == header.end()) {
    throw ParseError(path.string() + ":1: no \"label\" column in header");
  }
  const auto label_col = static_cast<std::size_t>(label_it - header.begin());

  Dataset ds;
  ds.dims = header.size() - 1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const auto where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != header.size()) {
      throw ParseError(where + ": expected " + std::to_string(header.size()) +
                       " fields, got " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto& cell = cells[c];
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      if (c == label_col) {
        int label = 0;
        auto [p, ec] = std::from_chars(first, last, label);
        if (ec != std::errc{} || p != last || label < 0) {
          throw ParseError(where + ": bad label \"" + cell + "\"");
        }
        ds.labels.push_back(label);
      } else {
        double v = 0.0;
        auto [p, ec] = std::from_chars(first, last, v);
        if (ec != std::errc{} || p != last || !std::isfinite(v)) {
          throw ParseError(where + ": bad number \"" + cell + "\" in column " +
                           std::to_string(c + 1));
        }
        ds.features.push_back(v);
      }
    }
  }
  assign_num_classes(ds);
  ds.validate();
  return ds;
}

Dataset load_dataset(const DatasetSource& source) {
  Dataset ds = std::visit(
      [](const auto& s) -> Dataset {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SyntheticSpec>) {
          return make_synthetic(s);
        } else if constexpr (std::is_same_v<T, IdxSource>) {
          return read_idx(s.images, s.labels);
        } else {
          return read_csv(s.path);
        }
      },
      source);
  ds.validate();
  return ds;
}

std::vector<ClientShard> partition(const Dataset& dataset,
                                   const PartitionSpec& spec) {
  const std::size_t n = dataset.size();
  const std::size_t clients = spec.num_clients;
  if (clients == 0) throw InvalidSpec("num_clients must be positive");
  if (clients > n) {
    throw InvalidSpec("num_clients (" + std::to_string(clients) +
                      ") exceeds dataset size (" + std::to_string(n) + ")");
  }
  if (spec.regime == PartitionRegime::kDirichlet &&
      !(spec.sigma > 0.0 && std::isfinite(spec.sigma))) {
    throw InvalidSpec("Dirichlet sigma must be positive");
  }

  std::vector<ClientShard> shards(clients);
  for (std::size_t i = 0; i < clients; ++i) shards[i].client_id = i;
  Rng rng(spec.seed);

  if (spec.regime == PartitionRegime::kIid) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const std::size_t base = n / clients;
    const std::size_t extra = n % clients;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < clients; ++i) {
      const std::size_t take = base + (i < extra ? 1 : 0);
      shards[i].example_indices.assign(order.begin() + pos,
                                       order.begin() + pos + take);
      pos += take;
    }
  } else {
    const auto classes = static_cast<std::size_t>(dataset.num_classes);
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < n; ++i) {
      by_class[static_cast<std::size_t>(dataset.labels[i])].push_back(i);
    }
    std::vector<double> remainder(clients);
    std::vector<std::size_t> counts(clients);
    std::vector<std::size_t> rank(clients);
    for (std::size_t c = 0; c < classes; ++c) {
      auto& rows = by_class[c];
      const auto p = rng.dirichlet(clients, spec.sigma);
      rng.shuffle(rows);
      const std::size_t nc = rows.size();
      std::size_t assigned = 0;
      for (std::size_t i = 0; i < clients; ++i) {
        const double quota = p[i] * static_cast<double>(nc);
        counts[i] = static_cast<std::size_t>(std::floor(quota));
        remainder[i] = quota - std::floor(quota);
        assigned += counts[i];
      }
      std::iota(rank.begin(), rank.end(), std::size_t{0});
      std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
        return remainder[a] > remainder[b];
      });
      for (std::size_t r = 0; assigned < nc; ++r, ++assigned) {
        ++counts[rank[r % clients]];
      }
      std::size_t pos = 0;
      for (std::size_t i = 0; i < clients; ++i) {
        auto& dst = shards[i].example_indices;
        dst.insert(dst.end(), rows.begin() + pos, rows.begin() + pos + counts[i]);
        pos += counts[i];
      }
    }
    for (std::size_t i = 0; i < clients; ++i) {
      if (!shards[i].example_indices.empty()) continue;
      std::size_t donor = 0;
      for (std::size_t j = 1; j < clients; ++j) {
        if (shards[j].data_size() > shards[donor].data_size()) donor = j;
      }
      auto& from = shards[donor].example_indices;
      shards[i].example_indices.push_back(from.back());
      from.pop_back();
    }
  }
  for (auto& s : shards) {
    std::sort(s.example_indices.begin(), s.example_indices.end());
  }
  return shards;
}

std::vector<std::vector<std::size_t>> label_histograms(
    const Dataset& dataset, std::span<const ClientShard> shards) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(shards.size());
  for (const auto& s : shards) {
    std::vector<std::size_t> h(static_cast<std::size_t>(dataset.num_classes), 0);
    for (auto idx : s.example_indices) {
      ++h[static_cast<std::size_t>(dataset.labels[idx])];
    }
    out.push_back(std::move(h));
  }
  return out;
}

double label_entropy(std::span<const std::size_t> histogram) {
  const double total = static_cast<double>(
      std::accumulate(histogram.begin(), histogram.end(), std::size_t{0}));
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto count : histogram) {
    if (count == 0) continue;
    const double p = static_cast<double>(count) / total;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace fedrank
