#include "laga/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "laga/rng.hpp"

namespace laga {

namespace {

const std::string kManifestHeader = "path\tidentity\tcamera\tsplit";

bool valid_split(const std::string& s) {
  return s == "train" || s == "query" || s == "gallery";
}

int parse_int_field(const std::string& s, const char* what, int line_no) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(std::string("manifest line ") + std::to_string(line_no) +
                      ": bad " + what + " value '" + s + "'");
  }
}

}  // namespace

std::vector<Sample> Manifest::split(const std::string& name) const {
  std::vector<Sample> out;
  for (const Sample& s : rows) {
    if (s.split == name) out.push_back(s);
  }
  return out;
}

std::filesystem::path Manifest::resolve(const Sample& s) const {
  std::filesystem::path p(s.path);
  return p.is_absolute() ? p : base_dir / p;
}

int Manifest::n_train_classes() const {
  int max_id = -1;
  for (const Sample& s : rows) {
    if (s.split == "train") max_id = std::max(max_id, s.identity);
  }
  return max_id + 1;
}

void validate_manifest(const Manifest& manifest) {
  std::set<std::pair<std::string, std::string>> seen;
  std::set<int> train_ids;
  std::unordered_set<std::string> query_paths, gallery_paths;
  std::set<int> query_ids, gallery_ids;
  for (const Sample& s : manifest.rows) {
    if (s.identity < 0 || s.camera < 0) {
      throw DataError("manifest row '" + s.path +
                      "': identity and camera must be >= 0");
    }
    if (!valid_split(s.split)) {
      throw DataError("manifest row '" + s.path + "': unknown split '" +
                      s.split + "'");
    }
    if (!seen.insert({s.path, s.split}).second) {
      throw DataError("manifest contains duplicate (path, split) row: '" +
                      s.path + "' in split '" + s.split + "'");
    }
    if (s.split == "train") train_ids.insert(s.identity);
    if (s.split == "query") {
      query_paths.insert(s.path);
      query_ids.insert(s.identity);
    }
    if (s.split == "gallery") {
      gallery_paths.insert(s.path);
      gallery_ids.insert(s.identity);
    }
  }
  if (!train_ids.empty()) {
    const int c = *train_ids.rbegin() + 1;
    if (static_cast<int>(train_ids.size()) != c || *train_ids.begin() != 0) {
      throw DataError(
          "train identities must be contiguous integers 0..C-1; found " +
          std::to_string(train_ids.size()) + " ids with max " +
          std::to_string(*train_ids.rbegin()));
    }
  }
  for (const std::string& p : query_paths) {
    if (gallery_paths.count(p)) {
      throw DataError("path '" + p + "' appears in both query and gallery");
    }
  }
  for (int id : query_ids) {
    if (!gallery_ids.count(id)) {
      throw DataError("query identity " + std::to_string(id) +
                      " has no gallery entry");
    }
  }
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  if (!std::getline(f, line)) {
    throw FormatError("manifest is empty: " + path.string());
  }
  if (line != kManifestHeader) {
    throw FormatError("manifest header must be '" + kManifestHeader +
                      "', got '" + line + "'");
  }
  int line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 4) {
      throw FormatError("manifest line " + std::to_string(line_no) +
                        ": expected 4 tab-separated fields, got " +
                        std::to_string(fields.size()));
    }
    Sample s;
    s.path = fields[0];
    s.identity = parse_int_field(fields[1], "identity", line_no);
    s.camera = parse_int_field(fields[2], "camera", line_no);
    s.split = fields[3];
    m.rows.push_back(std::move(s));
  }
  validate_manifest(m);
  return m;
}

void save_manifest(const Manifest& manifest,
                   const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write manifest: " + path.string());
  f << kManifestHeader << '\n';
  for (const Sample& s : manifest.rows) {
    f << s.path << '\t' << s.identity << '\t' << s.camera << '\t' << s.split
      << '\n';
  }
  if (!f) throw DataError("manifest write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// PPM
// ---------------------------------------------------------------------------

Tensor load_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError("bad PPM '" + path.string() + "': " + what +
                       " at byte offset " + std::to_string(pos));
  };
  auto skip_space = [&]() {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw fail(std::string("expected ") + what);
    }
    long v = 0;
    while (pos < bytes.size() &&
           std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1 << 24) throw fail(std::string(what) + " out of range");
      ++pos;
    }
    return static_cast<int>(v);
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw fail("magic is not 'P6'");
  }
  pos = 2;
  const int w = read_int("width");
  const int h = read_int("height");
  const int maxval = read_int("maxval");
  if (maxval != 255) throw fail("maxval must be 255");
  if (pos >= bytes.size()) throw fail("missing pixel data");
  ++pos;  // single whitespace byte after maxval

  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - pos < need) {
    throw FormatError("bad PPM '" + path.string() + "': payload truncated (" +
                      std::to_string(bytes.size() - pos) + " of " +
                      std::to_string(need) + " bytes) at byte offset " +
                      std::to_string(pos));
  }
  std::vector<double> data(need);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int c = 0; c < 3; ++c) {
        const unsigned char v = static_cast<unsigned char>(
            bytes[pos + (static_cast<std::size_t>(i) * w + j) * 3 + c]);
        data[(static_cast<std::size_t>(c) * h + i) * w + j] = v / 255.0;
      }
    }
  }
  return Tensor::from_data({3, h, w}, std::move(data));
}

void save_ppm(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("save_ppm expects a (3,H,W) image, got " +
                     shape_str(image.shape()));
  }
  const int h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) +
                    "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(w) * h * 3);
  const double* d = image.data().data();
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int c = 0; c < 3; ++c) {
        const double v = d[(static_cast<std::size_t>(c) * h + i) * w + j];
        const double clamped = std::min(1.0, std::max(0.0, v));
        out.push_back(static_cast<char>(
            static_cast<unsigned char>(std::lround(clamped * 255.0))));
      }
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write image: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("image write failed: " + path.string());
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 3) {
    throw ShapeError("resize_bilinear expects (C,H,W), got " +
                     shape_str(image.shape()));
  }
  if (out_h < 1 || out_w < 1) {
    throw ConfigError("resize_bilinear targets must be positive");
  }
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
  const double* src = image.data().data();
  for (int i = 0; i < out_h; ++i) {
    double fy = (i + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int j = 0; j < out_w; ++j) {
      double fx = (j + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ci = 0; ci < c; ++ci) {
        const double* ch = src + static_cast<std::size_t>(ci) * h * w;
        const double v =
            (1 - wy) * ((1 - wx) * ch[y0 * w + x0] + wx * ch[y0 * w + x1]) +
            wy * ((1 - wx) * ch[y1 * w + x0] + wx * ch[y1 * w + x1]);
        out[(static_cast<std::size_t>(ci) * out_h + i) * out_w + j] = v;
      }
    }
  }
  return Tensor::from_data({c, out_h, out_w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Synthetic identities
// ---------------------------------------------------------------------------

void SynthSpec::validate() const {
  if (n_identities < 2) throw ConfigError("synth.n_identities must be >= 2");
  if (images_per_identity < 2) {
    throw ConfigError("synth.images_per_identity must be >= 2");
  }
  if (height < 8 || width < 8) throw ConfigError("synth image size too small");
  if (n_cameras < 1) throw ConfigError("synth.n_cameras must be >= 1");
  if (brightness < 0 || translation < 0 || noise < 0) {
    throw ConfigError("synth nuisance strengths must be >= 0");
  }
  if (translation > 0.5) throw ConfigError("synth.translation must be <= 0.5");
}

namespace {

// Identity signal is a colored-patch texture; shape stays out of it so that
// a horizontal flip does not change who the image belongs to.
std::vector<double> identity_texture(const SynthSpec& spec, Rng rng) {
  const int h = spec.height, w = spec.width;
  std::vector<double> img(static_cast<std::size_t>(3) * h * w);
  double bg[3];
  for (double& v : bg) v = rng.uniform(0.05, 0.95);
  for (int c = 0; c < 3; ++c) {
    std::fill(img.begin() + static_cast<std::size_t>(c) * h * w,
              img.begin() + static_cast<std::size_t>(c + 1) * h * w, bg[c]);
  }
  const int n_patches = 8;
  for (int k = 0; k < n_patches; ++k) {
    const int ph = 2 + static_cast<int>(rng.index(static_cast<std::size_t>(h / 2)));
    const int pw = 2 + static_cast<int>(rng.index(static_cast<std::size_t>(w / 2)));
    const int top = static_cast<int>(rng.index(static_cast<std::size_t>(h - ph + 1)));
    const int left = static_cast<int>(rng.index(static_cast<std::size_t>(w - pw + 1)));
    double color[3];
    for (double& v : color) v = rng.uniform(0.0, 1.0);
    for (int c = 0; c < 3; ++c) {
      for (int i = top; i < top + ph; ++i) {
        for (int j = left; j < left + pw; ++j) {
          img[(static_cast<std::size_t>(c) * h + i) * w + j] = color[c];
        }
      }
    }
  }
  return img;
}

std::vector<double> nuisance_image(const std::vector<double>& base,
                                   const SynthSpec& spec, Rng rng) {
  const int h = spec.height, w = spec.width;
  const double gain = 1.0 + rng.uniform(-spec.brightness, spec.brightness);
  const int max_dy = static_cast<int>(spec.translation * h);
  const int max_dx = static_cast<int>(spec.translation * w);
  const int dy = max_dy == 0
                     ? 0
                     : static_cast<int>(rng.index(2 * max_dy + 1)) - max_dy;
  const int dx = max_dx == 0
                     ? 0
                     : static_cast<int>(rng.index(2 * max_dx + 1)) - max_dx;
  std::vector<double> img(base.size());
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < h; ++i) {
      const int si = std::min(std::max(i + dy, 0), h - 1);
      for (int j = 0; j < w; ++j) {
        const int sj = std::min(std::max(j + dx, 0), w - 1);
        double v = base[(static_cast<std::size_t>(c) * h + si) * w + sj] * gain;
        v += rng.uniform(-spec.noise, spec.noise);
        img[(static_cast<std::size_t>(c) * h + i) * w + j] =
            std::min(1.0, std::max(0.0, v));
      }
    }
  }
  return img;
}

std::string image_name(int identity, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "id%03d_im%03d.ppm", identity, index);
  return buf;
}

}  // namespace

Manifest synth_generate(const SynthSpec& spec,
                        const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw DataError("cannot create output directory '" + out_dir.string() +
                    "': " + ec.message());
  }

  const Rng root(spec.seed);
  Manifest manifest;
  manifest.base_dir = out_dir;

  const int m = spec.images_per_identity;
  const int n_query = (m - 1) / 3;
  for (int id = 0; id < spec.n_identities; ++id) {
    const std::vector<double> base = identity_texture(
        spec, root.child("texture").child(static_cast<std::uint64_t>(id)));

    std::vector<int> order(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng split_rng = root.child("split").child(static_cast<std::uint64_t>(id));
    split_rng.shuffle(order);

    for (int pos = 0; pos < m; ++pos) {
      const int j = order[static_cast<std::size_t>(pos)];
      const std::vector<double> img = nuisance_image(
          base, spec,
          root.child("image").child(
              static_cast<std::uint64_t>(id) * static_cast<std::uint64_t>(m) +
              static_cast<std::uint64_t>(j)));
      Sample s;
      s.path = image_name(id, j);
      s.identity = id;
      s.camera = j % spec.n_cameras;
      s.split = pos == 0 ? "gallery" : (pos <= n_query ? "query" : "train");
      save_ppm(Tensor::from_data({3, spec.height, spec.width}, img),
               out_dir / s.path);
      manifest.rows.push_back(std::move(s));
    }
  }
  std::sort(manifest.rows.begin(), manifest.rows.end(),
            [](const Sample& a, const Sample& b) { return a.path < b.path; });
  validate_manifest(manifest);
  save_manifest(manifest, out_dir / "manifest.tsv");
  return manifest;
}

}  // namespace laga
