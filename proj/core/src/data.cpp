#include "loupe/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "loupe/image_io.hpp"
#include "loupe/rng.hpp"

namespace loupe {

using json = nlohmann::json;

std::string to_string(Split split) {
  switch (split) {
  case Split::Train: return "train";
  case Split::Validation: return "val";
  case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Validation;
  if (text == "test") return Split::Test;
  throw DataError("unknown split '" + text + "' (expected train, val or test)");
}

std::string to_string(Anisotropy a) {
  switch (a) {
  case Anisotropy::Horizontal: return "horizontal";
  case Anisotropy::Vertical: return "vertical";
  case Anisotropy::Isotropic: return "isotropic";
  }
  return "isotropic";
}

Anisotropy parse_anisotropy(const std::string& text) {
  if (text == "horizontal") return Anisotropy::Horizontal;
  if (text == "vertical") return Anisotropy::Vertical;
  if (text == "isotropic") return Anisotropy::Isotropic;
  throw DomainError("unknown anisotropy '" + text + "' (expected horizontal, vertical or isotropic)");
}

std::size_t VolumeDataset::height() const {
  if (volumes.empty()) throw DataError("dataset is empty");
  return volumes.front().height();
}

std::size_t VolumeDataset::width() const {
  if (volumes.empty()) throw DataError("dataset is empty");
  return volumes.front().width();
}

std::size_t VolumeDataset::slice_count(Split split) const {
  std::size_t n = 0;
  for (const auto& v : volumes)
    if (v.split == split) n += v.slices();
  return n;
}

Tensor<float> VolumeDataset::stack(Split split) const {
  const std::size_t n = slice_count(split);
  if (n == 0) throw DataError("dataset has no " + to_string(split) + " slices");
  const std::size_t h = height(), w = width();
  Tensor<float> out(Shape{n, 2, h, w});
  std::size_t offset = 0;
  for (const auto& v : volumes) {
    if (v.split != split) continue;
    std::copy(v.data.data().begin(), v.data.data().end(), out.raw() + offset);
    offset += v.data.size();
  }
  return out;
}

void VolumeDataset::validate() const {
  if (volumes.empty()) throw DataError("dataset is empty");
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    const auto& v = volumes[i];
    if (v.data.rank() != 4 || v.data.dim(1) != 2)
      throw DataError("volume " + std::to_string(i) + " must have shape [S,2,H,W], got " + to_string(v.data.shape()));
    if (v.height() != height() || v.width() != width())
      throw DataError("volume " + std::to_string(i) + " has grid " + std::to_string(v.height()) + "x" +
                      std::to_string(v.width()) + ", dataset grid is " + std::to_string(height()) + "x" +
                      std::to_string(width()));
    const double peak = max_magnitude(v.data);
    if (std::abs(peak - 1.0) > 1e-6)
      throw DataError("volume " + std::to_string(i) + " is not normalized (max magnitude " + std::to_string(peak) + ")");
  }
}

double Ellipse::width() const {
  const double c = std::cos(angle), s = std::sin(angle);
  return 2.0 * std::sqrt(semi_major * semi_major * c * c + semi_minor * semi_minor * s * s);
}

double Ellipse::height() const {
  const double c = std::cos(angle), s = std::sin(angle);
  return 2.0 * std::sqrt(semi_major * semi_major * s * s + semi_minor * semi_minor * c * c);
}

bool Ellipse::contains(double x, double y) const {
  const double c = std::cos(angle), s = std::sin(angle);
  const double dx = x - cx, dy = y - cy;
  const double u = dx * c + dy * s;
  const double v = -dx * s + dy * c;
  return (u * u) / (semi_major * semi_major) + (v * v) / (semi_minor * semi_minor) <= 1.0;
}

namespace {

void validate_spec(const PhantomSpec& spec) {
  if (spec.height == 0 || spec.width == 0) throw DomainError("phantom grid must be non-empty");
  if (spec.total_volumes() == 0 || spec.slices_per_volume == 0) throw DomainError("phantom spec requests no images");
  if (spec.min_ellipses > spec.max_ellipses) throw DomainError("min_ellipses exceeds max_ellipses");
  if (spec.max_ellipses == 0 && spec.noise_level == 0.0)
    throw DomainError("degenerate phantom spec: zero ellipses and zero noise");
  if (spec.min_aspect < 1.0 || spec.max_aspect < spec.min_aspect) throw DomainError("aspect range must satisfy 1 <= min <= max");
  if (spec.noise_level < 0.0) throw DomainError("noise level must be non-negative");
}

/// Ellipses in the horizontal-convention frame (preferred axis along x).
std::vector<Ellipse> draw_frame_ellipses(const PhantomSpec& spec, Rng& rng) {
  const auto span = spec.max_ellipses - spec.min_ellipses + 1;
  const std::size_t count = spec.min_ellipses + static_cast<std::size_t>(rng.below(span));
  const double spread = spec.orientation_spread_deg * std::numbers::pi / 180.0;
  std::vector<Ellipse> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Ellipse e;
    const double r = 0.55 * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    e.cx = r * std::cos(phi);
    e.cy = r * std::sin(phi);
    e.semi_major = rng.uniform(0.1, 0.35);
    e.semi_minor = e.semi_major / rng.uniform(spec.min_aspect, spec.max_aspect);
    e.angle = spec.anisotropy == Anisotropy::Isotropic ? rng.uniform(0.0, std::numbers::pi) : spread * rng.normal();
    e.intensity = rng.uniform(spec.min_intensity, spec.max_intensity);
    out.push_back(e);
  }
  return out;
}

Ellipse transpose(const Ellipse& e) {
  Ellipse t = e;
  std::swap(t.cx, t.cy);
  t.angle = std::numbers::pi / 2.0 - e.angle;
  return t;
}

struct PhaseWave {
  double fx, fy, offset;
};

/// One complex slice [2, fh, fw] in the horizontal-convention frame.
Tensor<float> render_frame(const PhantomSpec& spec, std::size_t fh, std::size_t fw, Rng& rng) {
  Ellipse body;
  body.semi_major = 0.9;
  body.semi_minor = 0.9;
  body.intensity = rng.uniform(0.2, 0.4);
  const auto features = draw_frame_ellipses(spec, rng);
  std::vector<PhaseWave> waves(3);
  for (auto& w : waves) w = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.0, 2.0 * std::numbers::pi)};

  Tensor<float> out(Shape{2, fh, fw});
  const std::size_t plane = fh * fw;
  static constexpr double kSub[2] = {-0.25, 0.25};
  for (std::size_t i = 0; i < fh; ++i) {
    for (std::size_t j = 0; j < fw; ++j) {
      double mag = 0.0;
      for (double si : kSub) {
        for (double sj : kSub) {
          const double x = (static_cast<double>(j) + 0.5 + sj) / static_cast<double>(fw) * 2.0 - 1.0;
          const double y = (static_cast<double>(i) + 0.5 + si) / static_cast<double>(fh) * 2.0 - 1.0;
          if (!body.contains(x, y)) continue;
          double v = body.intensity;
          for (const auto& e : features)
            if (e.contains(x, y)) v += e.intensity;
          mag += v;
        }
      }
      mag *= 0.25;
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(fw) * 2.0 - 1.0;
      const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(fh) * 2.0 - 1.0;
      double phase = 0.0;
      for (const auto& w : waves) phase += std::cos(std::numbers::pi * (w.fx * x + w.fy * y) + w.offset);
      phase *= spec.phase_amplitude / static_cast<double>(waves.size());
      out[i * fw + j] = static_cast<float>(mag * std::cos(phase));
      out[plane + i * fw + j] = static_cast<float>(mag * std::sin(phase));
    }
  }
  if (spec.noise_level > 0.0)
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += static_cast<float>(spec.noise_level * rng.normal());
  return out;
}

Tensor<float> transpose_slice(const Tensor<float>& s) {
  const std::size_t h = s.dim(1), w = s.dim(2);
  Tensor<float> t(Shape{2, w, h});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) t[(c * w + j) * h + i] = s[(c * h + i) * w + j];
  return t;
}

void write_le_floats(std::ofstream& out, std::span<const float> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values[i], 4);
    for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

} // namespace

std::vector<Ellipse> draw_ellipses(const PhantomSpec& spec, Rng& rng) {
  auto ellipses = draw_frame_ellipses(spec, rng);
  if (spec.anisotropy == Anisotropy::Vertical)
    for (auto& e : ellipses) e = transpose(e);
  return ellipses;
}

VolumeDataset gen_phantoms(const PhantomSpec& spec) {
  validate_spec(spec);
  const bool vertical = spec.anisotropy == Anisotropy::Vertical;
  const std::size_t fh = vertical ? spec.width : spec.height;
  const std::size_t fw = vertical ? spec.height : spec.width;
  Rng master(spec.seed);
  VolumeDataset ds;
  const std::size_t plane = spec.height * spec.width;
  for (std::size_t v = 0; v < spec.total_volumes(); ++v) {
    Volume vol;
    vol.split = v < spec.train_volumes                      ? Split::Train
                : v < spec.train_volumes + spec.val_volumes ? Split::Validation
                                                            : Split::Test;
    vol.source = "phantom:" + std::to_string(spec.seed) + ":" + std::to_string(v);
    Tensor<float> data(Shape{spec.slices_per_volume, 2, spec.height, spec.width});
    for (std::size_t s = 0; s < spec.slices_per_volume; ++s) {
      Rng rng(master.fork());
      Tensor<float> slice = render_frame(spec, fh, fw, rng);
      if (vertical) slice = transpose_slice(slice);
      std::copy(slice.data().begin(), slice.data().end(), data.raw() + s * 2 * plane);
    }
    vol.data = normalize_volume(data);
    ds.volumes.push_back(std::move(vol));
  }
  json prov = {{"generator", "ellipse-phantom"},
               {"seed", spec.seed},
               {"height", spec.height},
               {"width", spec.width},
               {"anisotropy", to_string(spec.anisotropy)},
               {"slices_per_volume", spec.slices_per_volume},
               {"min_ellipses", spec.min_ellipses},
               {"max_ellipses", spec.max_ellipses},
               {"min_aspect", spec.min_aspect},
               {"max_aspect", spec.max_aspect},
               {"orientation_spread_deg", spec.orientation_spread_deg},
               {"noise_level", spec.noise_level},
               {"phase_amplitude", spec.phase_amplitude}};
  ds.provenance = prov.dump();
  return ds;
}

double max_magnitude(const Tensor<float>& volume) {
  if (volume.rank() < 3 || volume.dim(volume.rank() - 3) != 2)
    throw ShapeError("expected a [..., 2, H, W] tensor, got " + to_string(volume.shape()));
  const std::size_t plane = volume.dim(volume.rank() - 1) * volume.dim(volume.rank() - 2);
  const std::size_t blocks = volume.size() / (2 * plane);
  double peak = 0.0;
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const double re = volume[2 * b * plane + i], im = volume[(2 * b + 1) * plane + i];
      peak = std::max(peak, std::sqrt(re * re + im * im));
    }
  return peak;
}

Tensor<float> normalize_volume(const Tensor<float>& volume) {
  const double peak = max_magnitude(volume);
  if (peak == 0.0) throw DataError("cannot normalize an all-zero volume");
  Tensor<float> out = volume;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(volume[i] / peak);
  return out;
}

Tensor<double> magnitude(const Tensor<float>& complex) {
  if (complex.rank() < 3 || complex.dim(complex.rank() - 3) != 2)
    throw ShapeError("expected a [..., 2, H, W] tensor, got " + to_string(complex.shape()));
  Shape shape(complex.shape().begin(), complex.shape().end());
  shape.erase(shape.end() - 3);
  Tensor<double> out(shape);
  const std::size_t plane = complex.dim(complex.rank() - 1) * complex.dim(complex.rank() - 2);
  const std::size_t blocks = complex.size() / (2 * plane);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const double re = complex[2 * b * plane + i], im = complex[(2 * b + 1) * plane + i];
      out[b * plane + i] = std::sqrt(re * re + im * im);
    }
  return out;
}

template <typename Real>
Tensor<Real> center_crop(const Tensor<Real>& image, std::size_t target_height, std::size_t target_width) {
  if (image.rank() < 2) throw ShapeError("center_crop needs at least two axes");
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (target_height > h || target_width > w)
    throw ShapeError("crop target " + std::to_string(target_height) + "x" + std::to_string(target_width) +
                     " exceeds source " + std::to_string(h) + "x" + std::to_string(w));
  if (target_height == 0 || target_width == 0) throw ShapeError("crop target must be non-empty");
  const std::size_t oy = (h - target_height) / 2, ox = (w - target_width) / 2;
  Shape shape = image.shape();
  shape[shape.size() - 2] = target_height;
  shape[shape.size() - 1] = target_width;
  Tensor<Real> out(shape);
  const std::size_t planes = image.size() / (h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < target_height; ++i)
      for (std::size_t j = 0; j < target_width; ++j)
        out[(p * target_height + i) * target_width + j] = image[(p * h + i + oy) * w + j + ox];
  return out;
}

template Tensor<float> center_crop(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> center_crop(const Tensor<double>&, std::size_t, std::size_t);

void save_volume(const std::filesystem::path& manifest_path, const Tensor<float>& data, const std::string& source) {
  if (data.rank() != 4 || data.dim(1) != 2)
    throw ShapeError("volumes must have shape [S,2,H,W], got " + to_string(data.shape()));
  std::filesystem::path payload = manifest_path;
  payload.replace_extension(".f32");
  json manifest = {{"shape", data.shape()}, {"dtype", "f32le"}, {"data_file", payload.filename().string()}, {"source", source}};
  {
    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot open '" + manifest_path.string() + "' for writing");
    out << manifest.dump(2) << "\n";
  }
  std::ofstream out(payload, std::ios::binary);
  if (!out) throw DataError("cannot open '" + payload.string() + "' for writing");
  write_le_floats(out, data.data());
  if (!out) throw DataError("failed writing '" + payload.string() + "'");
}

Volume load_volume(const std::filesystem::path& manifest_path) {
  const json manifest = read_json(manifest_path);
  Shape shape;
  std::string dtype, data_file;
  Volume vol;
  try {
    shape = manifest.at("shape").get<Shape>();
    dtype = manifest.at("dtype").get<std::string>();
    data_file = manifest.at("data_file").get<std::string>();
    vol.source = manifest.value("source", std::string{});
  } catch (const json::exception& e) {
    throw DataError("manifest '" + manifest_path.string() + "' is missing a field: " + e.what());
  }
  if (dtype != "f32le") throw DataError("unsupported dtype '" + dtype + "' in '" + manifest_path.string() + "'");
  if (shape.size() != 4 || shape[1] != 2)
    throw DataError("manifest shape must be [S,2,H,W], got " + to_string(shape));
  for (auto d : shape)
    if (d == 0) throw DataError("manifest shape has a zero dimension: " + to_string(shape));
  const auto payload = manifest_path.parent_path() / data_file;
  std::ifstream in(payload, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open payload '" + payload.string() + "'");
  const auto actual = static_cast<std::size_t>(in.tellg());
  const std::size_t expected = numel(shape) * 4;
  if (actual != expected)
    throw DataError("payload '" + payload.string() + "' has " + std::to_string(actual) + " bytes, expected " +
                    std::to_string(expected) + " for shape " + to_string(shape));
  in.seekg(0);
  std::vector<unsigned char> bytes(expected);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
  std::vector<float> values(numel(shape));
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + static_cast<std::size_t>(b)]) << (8 * b);
    std::memcpy(&values[i], &bits, 4);
  }
  vol.data = Tensor<float>(shape, std::move(values));
  return vol;
}

void save_dataset(const std::filesystem::path& directory, const VolumeDataset& dataset) {
  std::filesystem::create_directories(directory);
  json index = {{"format", "loupe-dataset"}, {"volumes", json::array()}};
  try {
    index["provenance"] = json::parse(dataset.provenance);
  } catch (const json::exception&) {
    index["provenance"] = dataset.provenance;
  }
  for (std::size_t i = 0; i < dataset.volumes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "vol_%03zu.json", i);
    const auto& v = dataset.volumes[i];
    save_volume(directory / name, v.data, v.source);
    index["volumes"].push_back({{"manifest", name}, {"split", to_string(v.split)}});
  }
  std::ofstream out(directory / "dataset.json");
  if (!out) throw DataError("cannot write dataset index in '" + directory.string() + "'");
  out << index.dump(2) << "\n";
}

VolumeDataset load_dataset(const std::filesystem::path& path) {
  const auto index_path = std::filesystem::is_directory(path) ? path / "dataset.json" : path;
  const json index = read_json(index_path);
  VolumeDataset ds;
  try {
    if (index.at("format").get<std::string>() != "loupe-dataset")
      throw DataError("'" + index_path.string() + "' is not a loupe dataset index");
    for (const auto& entry : index.at("volumes")) {
      Volume v = load_volume(index_path.parent_path() / entry.at("manifest").get<std::string>());
      v.split = parse_split(entry.at("split").get<std::string>());
      if (std::abs(max_magnitude(v.data) - 1.0) > 1e-6) v.data = normalize_volume(v.data);
      ds.volumes.push_back(std::move(v));
    }
    if (index.contains("provenance")) ds.provenance = index["provenance"].dump();
  } catch (const json::exception& e) {
    throw DataError("malformed dataset index '" + index_path.string() + "': " + e.what());
  }
  ds.validate();
  return ds;
}

void export_magnitude_pgm(const std::filesystem::path& path, const Tensor<double>& magnitude_slice, double max_value) {
  if (magnitude_slice.rank() != 2) throw ShapeError("magnitude export expects an [H, W] slice");
  if (!(max_value > 0.0)) throw DomainError("magnitude export needs a positive maximum");
  GrayImage img;
  img.height = magnitude_slice.dim(0);
  img.width = magnitude_slice.dim(1);
  img.max_value = 65535;
  img.pixels.resize(magnitude_slice.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(std::clamp(magnitude_slice[i] / max_value, 0.0, 1.0) * 65535.0));
  write_pgm(path, img);
}

} // namespace loupe
