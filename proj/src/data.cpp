#include "s2h/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "s2h/rng.hpp"

namespace s2h {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_range(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("idx: truncated while reading " + what);
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Shape Dataset::feature_shape() const {
  Shape s(features.shape().begin() + 1, features.shape().end());
  return s;
}

Tensor Dataset::gather_features(std::span<const std::size_t> idx) const {
  const Shape fs = feature_shape();
  const std::size_t per = shape_size(fs);
  Shape out_shape = {idx.size()};
  out_shape.insert(out_shape.end(), fs.begin(), fs.end());
  std::vector<double> out(idx.size() * per);
  auto v = features.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(idx[i] * per),
              v.begin() + static_cast<std::ptrdiff_t>((idx[i] + 1) * per),
              out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor::from_values(std::move(out_shape), std::move(out));
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> idx) const {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

TrainVal gen_synthetic(SyntheticKind kind, std::size_t n, std::size_t num_classes, double noise,
                       std::uint64_t seed) {
  if (num_classes == 0 || n < num_classes) {
    throw ContractError("gen_synthetic: need n >= num_classes >= 1");
  }
  if (noise < 0.0) throw ContractError("gen_synthetic: noise must be >= 0");

  Rng point_rng = Rng(seed).split(1);
  Rng split_rng = Rng(seed).split(2);

  std::vector<double> features(n * 2);
  std::vector<int> labels(n);
  std::size_t row = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const std::size_t count = n / num_classes + (k < n % num_classes ? 1 : 0);
    for (std::size_t i = 0; i < count; ++i, ++row) {
      double x = 0.0, y = 0.0;
      if (kind == SyntheticKind::blobs) {
        const double angle = 2.0 * kPi * static_cast<double>(k) / static_cast<double>(num_classes);
        x = 3.0 * std::cos(angle) + noise * point_rng.next_gaussian();
        y = 3.0 * std::sin(angle) + noise * point_rng.next_gaussian();
      } else {
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(count);
        const double radius = 3.0 * t;
        const double angle = 3.5 * kPi * t + 2.0 * kPi * static_cast<double>(k) / static_cast<double>(num_classes);
        x = radius * std::cos(angle) + noise * point_rng.next_gaussian();
        y = radius * std::sin(angle) + noise * point_rng.next_gaussian();
      }
      features[row * 2] = x;
      features[row * 2 + 1] = y;
      labels[row] = static_cast<int>(k);
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle_indices(order, split_rng);
  const std::size_t n_train = (n * 8) / 10;

  std::ostringstream prov;
  prov << (kind == SyntheticKind::blobs ? "blobs" : "spirals") << "(n=" << n
       << ",classes=" << num_classes << ",noise=" << noise << ",seed=" << seed << ")";

  auto subset = [&](std::size_t begin, std::size_t end, const char* tag) {
    Dataset ds;
    std::vector<double> f((end - begin) * 2);
    std::vector<int> l(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      f[(i - begin) * 2] = features[order[i] * 2];
      f[(i - begin) * 2 + 1] = features[order[i] * 2 + 1];
      l[i - begin] = labels[order[i]];
    }
    ds.features = Tensor::from_values({end - begin, 2}, std::move(f));
    ds.labels = std::move(l);
    ds.num_classes = num_classes;
    ds.split = tag;
    ds.provenance = prov.str();
    return ds;
  };

  TrainVal tv;
  tv.train = subset(0, n_train, "train");
  tv.val = subset(n_train, n, "val");
  return tv;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw IoError("idx: cannot open '" + images_path + "'");
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw IoError("idx: cannot open '" + labels_path + "'");

  std::ostringstream hex;
  const std::uint32_t imagic = read_be32(images, "images magic");
  if (imagic != kImagesMagic) {
    hex << std::hex << imagic;
    throw FormatError("idx: images magic 0x" + hex.str() + ", expected 0x803");
  }
  const std::uint32_t lmagic = read_be32(labels, "labels magic");
  if (lmagic != kLabelsMagic) {
    hex << std::hex << lmagic;
    throw FormatError("idx: labels magic 0x" + hex.str() + ", expected 0x801");
  }
  const std::uint32_t n_images = read_be32(images, "image count");
  const std::uint32_t rows = read_be32(images, "rows");
  const std::uint32_t cols = read_be32(images, "cols");
  const std::uint32_t n_labels = read_be32(labels, "label count");
  if (n_images != n_labels) {
    throw FormatError("idx: " + std::to_string(n_images) + " images but " +
                      std::to_string(n_labels) + " labels");
  }

  const std::size_t pixels = static_cast<std::size_t>(n_images) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  images.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
  if (images.gcount() != static_cast<std::streamsize>(pixels)) {
    throw FormatError("idx: truncated image payload in '" + images_path + "'");
  }
  std::vector<unsigned char> raw_labels(n_labels);
  labels.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n_labels));
  if (labels.gcount() != static_cast<std::streamsize>(n_labels)) {
    throw FormatError("idx: truncated label payload in '" + labels_path + "'");
  }

  Dataset ds;
  std::vector<double> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i) values[i] = static_cast<double>(raw[i]) / 255.0;
  ds.features = Tensor::from_values({n_images, 1, rows, cols}, std::move(values));
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = 0;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.split = "full";
  ds.provenance = "idx(" + images_path + "," + labels_path + ")";
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  const Shape fs = ds.feature_shape();
  if (fs.size() != 3 || fs[0] != 1) {
    throw ContractError("save_idx: features must be [N x 1 x rows x cols]");
  }
  std::ofstream images(images_path, std::ios::binary);
  if (!images) throw IoError("idx: cannot write '" + images_path + "'");
  std::ofstream labels(labels_path, std::ios::binary);
  if (!labels) throw IoError("idx: cannot write '" + labels_path + "'");

  write_be32(images, kImagesMagic);
  write_be32(images, static_cast<std::uint32_t>(ds.size()));
  write_be32(images, static_cast<std::uint32_t>(fs[1]));
  write_be32(images, static_cast<std::uint32_t>(fs[2]));
  auto v = ds.features.values();
  std::vector<unsigned char> raw(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(v[i] * 255.0));
  }
  images.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));

  write_be32(labels, kLabelsMagic);
  write_be32(labels, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) {
    const unsigned char byte = static_cast<unsigned char>(l);
    labels.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv: empty file '" + path + "'");

  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::ptrdiff_t label_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "label") label_col = static_cast<std::ptrdiff_t>(i);
  }
  if (label_col < 0) throw FormatError("csv: no column named 'label' in '" + path + "'");
  const std::size_t n_features = header.size() - 1;
  if (n_features == 0) throw FormatError("csv: no feature columns in '" + path + "'");

  std::vector<double> features;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (static_cast<std::ptrdiff_t>(col) == label_col) {
          labels.push_back(std::stoi(cell));
        } else {
          features.push_back(std::stod(cell));
        }
      } catch (const std::exception&) {
        throw FormatError("csv: bad value '" + cell + "' at line " + std::to_string(line_no));
      }
      ++col;
    }
    if (col != header.size()) {
      throw FormatError("csv: line " + std::to_string(line_no) + " has " + std::to_string(col) +
                        " cells, expected " + std::to_string(header.size()));
    }
  }
  if (labels.empty()) throw FormatError("csv: no data rows in '" + path + "'");

  Dataset ds;
  ds.features = Tensor::from_values({labels.size(), n_features}, std::move(features));
  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw FormatError("csv: negative label in '" + path + "'");
    max_label = std::max(max_label, l);
  }
  ds.labels = std::move(labels);
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.split = "full";
  ds.provenance = "csv(" + path + ")";
  return ds;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw ContractError("batch_iter: batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).split(0x9a7c0000ull + epoch);
  shuffle_indices(order, rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace s2h
