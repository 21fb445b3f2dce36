#pragma once

// Datasets: IDX (MNIST) files, synthetic Gaussian blobs, and seeded batching.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sdl/error.hpp"
#include "sdl/network.hpp"
#include "sdl/numerics.hpp"

namespace sdl {

struct Dataset {
  Matrix features;  // input_dim × N, column samples
  Labels labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t input_dim() const { return features.rows(); }

  // Columns `idx` gathered into a batch matrix plus labels.
  std::pair<Matrix, Labels> gather(std::span<const std::size_t> idx) const {
    Matrix b(features.rows(), idx.size());
    Labels y(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      require(idx[k] < size(), ErrorKind::InvalidArgument, "Dataset::gather: index out of range");
      for (std::size_t r = 0; r < features.rows(); ++r) b(r, k) = features(r, idx[k]);
      y[k] = labels[idx[k]];
    }
    return {std::move(b), std::move(y)};
  }

  void validate() const {
    require(size() >= 1, ErrorKind::Data, "dataset is empty");
    require(features.cols() == size(), ErrorKind::Data, "dataset: feature/label count mismatch");
    for (std::size_t y : labels) require(y < num_classes, ErrorKind::Data, "dataset: label out of range");
  }
};

// First `n` samples (or all if fewer).
inline Dataset take_prefix(const Dataset& ds, std::size_t n) {
  n = std::min(n, ds.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  auto [f, y] = ds.gather(idx);
  return {std::move(f), std::move(y), ds.num_classes};
}

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& path) {
  if (b.size() < offset + 4)
    fail(ErrorKind::Data, path + ": truncated header at offset " + std::to_string(offset));
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) | (std::uint32_t{b[offset + 2]} << 8) |
         std::uint32_t{b[offset + 3]};
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Big-endian IDX images (rows × cols unsigned bytes per image) and labels.
// Pixels are scaled by 1/255 and flattened row-major into columns.
// num_classes = max label + 1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file_bytes(images_path);
  const auto lab = detail::read_file_bytes(labels_path);

  const std::uint32_t im_magic = detail::read_be32(img, 0, images_path);
  if (im_magic != kIdxImageMagic)
    fail(ErrorKind::Data, images_path + ": bad magic at offset 0 (expected 0x00000803)");
  const std::size_t n_img = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t dim = rows * cols;
  require(dim >= 1, ErrorKind::Data, images_path + ": zero-sized images");
  const std::size_t need = 16 + n_img * dim;
  if (img.size() < need)
    fail(ErrorKind::Data, images_path + ": truncated pixel data at offset " + std::to_string(img.size()) + " (expected " +
                              std::to_string(need) + " bytes)");
  if (img.size() > need) fail(ErrorKind::Data, images_path + ": trailing bytes at offset " + std::to_string(need));

  const std::uint32_t lb_magic = detail::read_be32(lab, 0, labels_path);
  if (lb_magic != kIdxLabelMagic)
    fail(ErrorKind::Data, labels_path + ": bad magic at offset 0 (expected 0x00000801)");
  const std::size_t n_lab = detail::read_be32(lab, 4, labels_path);
  if (n_lab != n_img)
    fail(ErrorKind::Data, labels_path + ": count at offset 4 is " + std::to_string(n_lab) + " but images hold " +
                              std::to_string(n_img));
  if (lab.size() < 8 + n_lab)
    fail(ErrorKind::Data, labels_path + ": truncated label data at offset " + std::to_string(lab.size()));
  if (lab.size() > 8 + n_lab) fail(ErrorKind::Data, labels_path + ": trailing bytes at offset " + std::to_string(8 + n_lab));
  require(n_img >= 1, ErrorKind::Data, images_path + ": no images");

  Dataset ds;
  ds.features = Matrix(dim, n_img);
  ds.labels.resize(n_img);
  for (std::size_t s = 0; s < n_img; ++s) {
    const unsigned char* px = img.data() + 16 + s * dim;
    for (std::size_t i = 0; i < dim; ++i) ds.features(i, s) = static_cast<double>(px[i]) / 255.0;
    ds.labels[s] = lab[8 + s];
  }
  ds.num_classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  return ds;
}

// Writes raw IDX files from byte images (n × rows·cols) and labels.
inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      const std::vector<unsigned char>& pixels, std::size_t n, std::size_t rows, std::size_t cols,
                      const std::vector<unsigned char>& labels) {
  require(pixels.size() == n * rows * cols && labels.size() == n, ErrorKind::InvalidArgument, "write_idx: size mismatch");
  std::ofstream im(images_path, std::ios::binary);
  if (!im) fail(ErrorKind::Io, "cannot open " + images_path);
  detail::put_be32(im, kIdxImageMagic);
  detail::put_be32(im, static_cast<std::uint32_t>(n));
  detail::put_be32(im, static_cast<std::uint32_t>(rows));
  detail::put_be32(im, static_cast<std::uint32_t>(cols));
  im.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  std::ofstream lb(labels_path, std::ios::binary);
  if (!lb) fail(ErrorKind::Io, "cannot open " + labels_path);
  detail::put_be32(lb, kIdxLabelMagic);
  detail::put_be32(lb, static_cast<std::uint32_t>(n));
  lb.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!im || !lb) fail(ErrorKind::Io, "write_idx: write failed");
}

// Class centers ~ N(0, I_dim); samples = center + spread·N(0, I_dim).
// Samples are interleaved by class: sample i belongs to class i mod classes.
inline Dataset synthetic_blobs(std::size_t classes, std::size_t dim, std::size_t n_per_class, double spread, Rng& rng) {
  require(classes >= 1 && dim >= 1 && n_per_class >= 1, ErrorKind::InvalidArgument, "synthetic_blobs: counts must be >= 1");
  require(spread >= 0.0, ErrorKind::InvalidArgument, "synthetic_blobs: spread must be >= 0");
  Matrix centers(classes, dim);
  for (double& v : centers.values()) v = rng.normal();
  Dataset ds;
  ds.num_classes = classes;
  ds.features = Matrix(dim, classes * n_per_class);
  ds.labels.resize(classes * n_per_class);
  for (std::size_t s = 0; s < classes * n_per_class; ++s) {
    const std::size_t c = s % classes;
    ds.labels[s] = c;
    for (std::size_t i = 0; i < dim; ++i) ds.features(i, s) = centers(c, i) + spread * rng.normal();
  }
  return ds;
}

// Seeded batches of sample indices. Without replacement: a fresh shuffle per
// epoch, the short last batch is kept. With replacement: i.i.d. uniform indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, bool with_replacement, Rng rng)
      : n_(n), batch_(batch), with_replacement_(with_replacement), rng_(std::move(rng)) {
    require(n >= 1, ErrorKind::InvalidArgument, "BatchSampler: dataset is empty");
    require(batch >= 1, ErrorKind::InvalidArgument, "BatchSampler: batch size must be >= 1");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    if (with_replacement_) {
      out.resize(batch_);
      for (auto& i : out) i = rng_.below(n_);
      ++batches_;
      if (batches_ * batch_ >= (epoch_ + 1) * n_) ++epoch_;
      return out;
    }
    if (pos_ == 0) shuffle();
    const std::size_t end = std::min(pos_ + batch_, n_);
    out.assign(order_.begin() + static_cast<std::ptrdiff_t>(pos_), order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    ++batches_;
    if (pos_ == n_) {
      pos_ = 0;
      ++epoch_;
    }
    return out;
  }

  // Completed epochs (with replacement: floor(samples drawn / n)).
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

 private:
  void shuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);  // Fisher–Yates
  }

  std::size_t n_, batch_;
  bool with_replacement_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
  std::size_t batches_ = 0;
};

}  // namespace sdl
