#include "gia/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gia/errors.hpp"
#include "gia/rng.hpp"

namespace gia::data {

namespace {

struct Color {
  double r, g, b;
};

Color random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

bool inside_triangle(double px, double py, const double (&v)[3][2]) {
  auto side = [&](int a, int b) {
    return (v[b][0] - v[a][0]) * (py - v[a][1]) - (v[b][1] - v[a][1]) * (px - v[a][0]);
  };
  const double d0 = side(0, 1), d1 = side(1, 2), d2 = side(2, 0);
  const bool neg = d0 < 0 || d1 < 0 || d2 < 0, pos = d0 > 0 || d1 > 0 || d2 > 0;
  return !(neg && pos);
}

}  // namespace

Dataset synthetic_shapes(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.count == 0 || spec.height < 4 || spec.width < 4) throw PreconditionError("synthetic dataset is too small");
  const std::size_t h = spec.height, w = spec.width;
  Dataset ds{Tensor({spec.count, 3, h, w}), {}};
  for (std::size_t n = 0; n < spec.count; ++n) {
    Rng rng(derive_seed(seed, n));
    const auto cls = static_cast<ShapeClass>(rng.below(kShapeClasses));
    ds.labels.push_back(static_cast<std::size_t>(cls));
    const Color bg = random_color(rng);
    Color fg = random_color(rng);
    // keep the shape visibly distinct from the background
    if (std::abs(fg.r - bg.r) + std::abs(fg.g - bg.g) + std::abs(fg.b - bg.b) < 0.6) {
      fg = {1.0 - bg.r, 1.0 - bg.g, 1.0 - bg.b};
    }
    const double size = static_cast<double>(std::min(h, w));
    const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(w);
    const double cy = rng.uniform(0.3, 0.7) * static_cast<double>(h);
    const double half = rng.uniform(0.18, 0.32) * size;
    const double half_y = rng.uniform(0.18, 0.32) * size;
    double tri[3][2];
    for (int k = 0; k < 3; ++k) {
      const double angle = rng.uniform(0.0, 0.5) + k * 2.0943951023931953;
      tri[k][0] = cx + half * 1.3 * std::cos(angle);
      tri[k][1] = cy + half * 1.3 * std::sin(angle);
    }
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double px = static_cast<double>(j) + 0.5, py = static_cast<double>(i) + 0.5;
        bool in = false;
        switch (cls) {
          case ShapeClass::Rectangle: in = std::abs(px - cx) <= half && std::abs(py - cy) <= half_y; break;
          case ShapeClass::Circle: in = std::hypot(px - cx, py - cy) <= half; break;
          case ShapeClass::Triangle: in = inside_triangle(px, py, tri); break;
        }
        const Color c = in ? fg : bg;
        const double noise = in ? 0.0 : spec.noise;
        const double vals[3] = {c.r, c.g, c.b};
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = vals[ch] + noise * rng.uniform(-1.0, 1.0);
          ds.pixels.at(n, ch, i, j) = std::clamp(v, 0.0, 1.0);
        }
      }
  }
  return ds;
}

Dataset read_cifar_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PreconditionError("cannot open CIFAR file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw PreconditionError("CIFAR file size " + std::to_string(bytes.size()) + " is not a multiple of " +
                            std::to_string(kCifarRecord));
  }
  const std::size_t count = bytes.size() / kCifarRecord;
  Dataset ds{Tensor({count, 3, 32, 32}), {}};
  for (std::size_t n = 0; n < count; ++n) {
    const unsigned char* rec = bytes.data() + n * kCifarRecord;
    ds.labels.push_back(rec[0]);
    for (std::size_t k = 0; k < 3 * 1024; ++k) ds.pixels[n * 3072 + k] = rec[1 + k] / 255.0;
  }
  return ds;
}

PpmImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PreconditionError("cannot open image '" + path + "'");
  auto token = [&]() {
    std::string t;
    while (in) {
      const int c = in.get();
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(c)) {
        if (!t.empty()) return t;
      } else if (c != EOF) {
        t.push_back(static_cast<char>(c));
      }
    }
    return t;
  };
  if (token() != "P6") throw PreconditionError("'" + path + "' is not a binary PPM");
  PpmImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw PreconditionError("'" + path + "' must use maxval 255");
  } catch (const std::logic_error&) {
    throw PreconditionError("'" + path + "' has a malformed PPM header");
  }
  img.rgb.resize(img.width * img.height * 3);
  if (!in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()))) {
    throw PreconditionError("'" + path + "' is truncated");
  }
  return img;
}

void write_ppm(const std::string& path, const PpmImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write '" + path + "'");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw RuntimeFailure("write to '" + path + "' failed");
}

PpmImage to_ppm(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("PPM output needs a 3 x H x W image");
  PpmImage img{chw.dim(2), chw.dim(1), {}};
  img.rgb.resize(img.width * img.height * 3);
  const std::size_t plane = img.width * img.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(chw[c * plane + p], 0.0, 1.0);
      img.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

Tensor from_ppm(const PpmImage& image) {
  Tensor t({3, image.height, image.width});
  const std::size_t plane = image.width * image.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + p] = image.rgb[p * 3 + c] / 255.0;
  return t;
}

PpmImage panel(const std::vector<Tensor>& top, const std::vector<Tensor>& bottom) {
  if (top.empty() || top.size() != bottom.size()) throw PreconditionError("panel rows must have equal length");
  const std::size_t h = top[0].dim(1), w = top[0].dim(2), n = top.size();
  PpmImage img{n * (w + 1) + 1, 2 * (h + 1) + 1, {}};
  img.rgb.assign(img.width * img.height * 3, 255);
  auto blit = [&](const Tensor& t, std::size_t row, std::size_t col) {
    const auto tile = to_ppm(t);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t c = 0; c < 3; ++c) {
          img.rgb[((row * (h + 1) + 1 + i) * img.width + col * (w + 1) + 1 + j) * 3 + c] = tile.rgb[(i * w + j) * 3 + c];
        }
  };
  for (std::size_t k = 0; k < n; ++k) {
    blit(top[k], 0, k);
    blit(bottom[k], 1, k);
  }
  return img;
}

Dataset read_image_dir(const std::string& dir, const std::string& labels_file) {
  std::ifstream in(labels_file);
  if (!in) throw PreconditionError("cannot open labels file '" + labels_file + "'");
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string file;
    long label = -1;
    if (!(ls >> file >> label) || label < 0) throw PreconditionError("bad labels line: " + line);
    images.push_back(from_ppm(read_ppm((std::filesystem::path(dir) / file).string())));
    labels.push_back(static_cast<std::size_t>(label));
    if (images.back().shape() != images.front().shape()) throw PreconditionError("images differ in size: " + file);
  }
  if (images.empty()) throw PreconditionError("labels file lists no images");
  const Shape s = images.front().shape();
  Dataset ds{Tensor({images.size(), s[0], s[1], s[2]}), labels};
  for (std::size_t n = 0; n < images.size(); ++n)
    std::copy(images[n].storage().begin(), images[n].storage().end(),
              ds.pixels.storage().begin() + static_cast<std::ptrdiff_t>(n * images[n].numel()));
  return ds;
}

nn::Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, const Normalization& norm) {
  if (indices.empty()) throw PreconditionError("batch is empty");
  const Shape s = ds.pixels.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  Tensor pixels({indices.size(), s[1], s[2], s[3]});
  nn::Batch batch;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= ds.size()) throw PreconditionError("batch index beyond dataset");
    std::copy_n(ds.pixels.storage().begin() + static_cast<std::ptrdiff_t>(indices[k] * per), per,
                pixels.storage().begin() + static_cast<std::ptrdiff_t>(k * per));
    batch.labels.push_back(ds.labels[indices[k]]);
  }
  batch.images = norm.normalize(pixels);
  return batch;
}

std::vector<std::vector<std::size_t>> sample_batches(std::size_t dataset_size, std::size_t batch, std::size_t count,
                                                     std::uint64_t seed) {
  if (batch == 0 || count == 0) throw PreconditionError("batch size and count must be positive");
  if (batch * count > dataset_size) {
    throw PreconditionError(std::to_string(count) + " batches of " + std::to_string(batch) + " exceed the " +
                            std::to_string(dataset_size) + "-image dataset");
  }
  std::vector<std::size_t> order(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = dataset_size; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t k = 0; k < count; ++k) out.emplace_back(order.begin() + k * batch, order.begin() + (k + 1) * batch);
  return out;
}

}  // namespace gia::data
