#include "vipa/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "vipa/numerics/random.hpp"

namespace vipa {

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

std::string to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
  }
  return "?";
}

std::string to_string(Size s) { return s == Size::small ? "small" : "large"; }

std::string to_string(Relation r) {
  switch (r) {
    case Relation::left: return "left";
    case Relation::right: return "right";
    case Relation::top: return "top";
    case Relation::bottom: return "bottom";
  }
  return "?";
}

namespace {

constexpr double kSquareHalf = 0.8;
constexpr double kSqrt3Half = 0.8660254037844386;
constexpr std::uint8_t kBackground = 20;
constexpr std::array<std::array<std::uint8_t, 3>, 4> kPalette = {{
    {230, 38, 38},   // red
    {38, 204, 51},   // green
    {51, 77, 230},   // blue
    {230, 217, 38},  // yellow
}};

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

// Radius of a circle around the centre that encloses the shape.
double bound(const SceneObject& o) {
  return o.shape == ShapeKind::square ? o.radius * kSquareHalf * std::sqrt(2.0) : o.radius;
}

}  // namespace

bool SceneObject::contains(double x, double y) const {
  const double dx = x - cx, dy = y - cy;
  switch (shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= radius * radius;
    case ShapeKind::square: return std::abs(dx) <= kSquareHalf * radius && std::abs(dy) <= kSquareHalf * radius;
    case ShapeKind::triangle: {
      const double ax = cx, ay = cy - radius;
      const double bx = cx + kSqrt3Half * radius, by = cy + 0.5 * radius;
      const double qx = cx - kSqrt3Half * radius, qy = by;
      const double e1 = edge(ax, ay, bx, by, x, y), e2 = edge(bx, by, qx, qy, x, y), e3 = edge(qx, qy, ax, ay, x, y);
      return (e1 >= 0 && e2 >= 0 && e3 >= 0) || (e1 <= 0 && e2 <= 0 && e3 <= 0);
    }
  }
  return false;
}

std::string Expression::text() const {
  std::string s;
  if (!article.empty()) s += article + " ";
  if (size) s += to_string(*size) + " ";
  s += to_string(color) + " " + to_string(shape);
  if (relation) s += " on the " + to_string(*relation);
  return s;
}

std::vector<std::size_t> match_expression(const Expression& e, const std::vector<SceneObject>& objects) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    if (o.color == e.color && o.shape == e.shape && (!e.size || o.size == *e.size)) cand.push_back(i);
  }
  if (!e.relation || cand.size() <= 1) return cand;
  // Larger key = further in the relation's direction.
  auto key = [&](std::size_t i) {
    const auto& o = objects[i];
    switch (*e.relation) {
      case Relation::left: return -o.cx;
      case Relation::right: return o.cx;
      case Relation::top: return -o.cy;
      case Relation::bottom: return o.cy;
    }
    return 0.0;
  };
  std::sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });
  if (key(cand[0]) - key(cand[1]) < kRelationMargin) return {};
  return {cand[0]};
}

bool SceneGrammar::is_held_out(const SceneObject& o) const {
  const AttributeTriple t{o.size, o.color, o.shape};
  return std::find(held_out.begin(), held_out.end(), t) != held_out.end();
}

namespace {

std::size_t pick(Rng& rng, std::size_t n) { return static_cast<std::size_t>(uniform_open01(rng) * n) % n; }

AttributeTriple random_triple(Rng& rng) {
  return {static_cast<Size>(pick(rng, 2)), static_cast<Color>(pick(rng, 4)), static_cast<ShapeKind>(pick(rng, 3))};
}

SceneObject with_attributes(const AttributeTriple& t) {
  SceneObject o;
  o.size = t.size;
  o.color = t.color;
  o.shape = t.shape;
  return o;
}

bool place(SceneObject& o, const std::vector<SceneObject>& placed, std::size_t h, std::size_t w, Rng& rng) {
  const double scale = static_cast<double>(std::min(h, w)) / 64.0;
  o.radius = (o.size == Size::small ? uniform(rng, 7.0, 9.0) : uniform(rng, 12.0, 15.0)) * scale;
  const double b = bound(o);
  if (2 * b + 2 >= static_cast<double>(std::min(h, w))) return false;
  for (int attempt = 0; attempt < 100; ++attempt) {
    o.cx = uniform(rng, b + 1, static_cast<double>(w) - b - 1);
    o.cy = uniform(rng, b + 1, static_cast<double>(h) - b - 1);
    bool ok = true;
    for (const auto& p : placed) {
      if (std::hypot(o.cx - p.cx, o.cy - p.cy) < b + bound(p) + 3.0) {
        ok = false;
        break;
      }
    }
    if (ok) return true;
  }
  return false;
}

std::optional<SyntheticScene> try_generate(const SceneGrammar& g, Rng& rng, std::size_t h, std::size_t w,
                                           SplitKind split) {
  AttributeTriple ref;
  if (split == SplitKind::held_out) {
    ref = g.held_out[pick(rng, g.held_out.size())];
  } else {
    do {
      ref = random_triple(rng);
    } while (g.is_held_out(with_attributes(ref)));
  }
  const std::size_t n = g.min_objects + pick(rng, g.max_objects - g.min_objects + 1);
  const std::size_t form = pick(rng, 4);

  std::vector<SceneObject> objs{with_attributes(ref)};
  while (objs.size() < n) {
    AttributeTriple t = random_triple(rng);
    const bool twin = objs.size() == 1 && ((form == 0 && uniform_open01(rng) < 0.5) || form == 3);
    if (twin) {
      t.color = ref.color;
      t.shape = ref.shape;
      if (form == 0) t.size = ref.size == Size::small ? Size::large : Size::small;
    }
    auto o = with_attributes(t);
    if (split == SplitKind::train && !g.held_out_distractors && g.is_held_out(o)) continue;
    objs.push_back(o);
  }
  std::vector<SceneObject> placed;
  for (auto& o : objs) {
    if (!place(o, placed, h, w, rng)) return std::nullopt;
    placed.push_back(o);
  }

  Expression e;
  e.color = ref.color;
  e.shape = ref.shape;
  switch (form) {
    case 0:
      e.article = "the";
      e.size = ref.size;
      break;
    case 1: e.article = "a"; break;
    case 2: e.article = "the"; break;
    default: {
      std::array<Relation, 4> rels{Relation::left, Relation::right, Relation::top, Relation::bottom};
      for (std::size_t i = rels.size(); i > 1; --i) std::swap(rels[i - 1], rels[pick(rng, i)]);
      for (auto r : rels) {
        e.relation = r;
        if (match_expression(e, placed) == std::vector<std::size_t>{0}) break;
        e.relation.reset();
      }
      if (!e.relation) return std::nullopt;
    }
  }
  if (match_expression(e, placed) != std::vector<std::size_t>{0}) return std::nullopt;

  SyntheticScene scene;
  scene.objects = placed;
  scene.referent = 0;
  scene.expression = e;
  auto& s = scene.sample;
  s.expression = e.text();
  s.image.height = h;
  s.image.width = w;
  s.image.pixels.assign(h * w * 3, static_cast<float>(kBackground) / 255.0f);
  s.mask.assign(h * w, 0);
  for (std::size_t k = 0; k < placed.size(); ++k) {
    const auto& o = placed[k];
    const auto& rgb = kPalette[static_cast<std::size_t>(o.color)];
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!o.contains(x + 0.5, y + 0.5)) continue;
        for (std::size_t c = 0; c < 3; ++c) s.image.pixels[(y * w + x) * 3 + c] = static_cast<float>(rgb[c]) / 255.0f;
        if (k == 0) s.mask[y * w + x] = 1;
      }
  }
  const auto area = std::count(s.mask.begin(), s.mask.end(), std::uint8_t{1});
  if (area == 0 || static_cast<std::size_t>(area) * 2 >= h * w) return std::nullopt;
  return scene;
}

}  // namespace

SyntheticScene generate_scene(const SceneGrammar& grammar, std::uint64_t seed, std::size_t height, std::size_t width,
                              SplitKind split) {
  if (height == 0 || width == 0 || height % 16 || width % 16) {
    throw std::invalid_argument("scene size " + std::to_string(height) + "x" + std::to_string(width) +
                                " must be positive multiples of 16");
  }
  if (grammar.min_objects < 1 || grammar.max_objects < grammar.min_objects) {
    throw std::invalid_argument("invalid object count range");
  }
  if (split == SplitKind::held_out && grammar.held_out.empty()) {
    throw std::invalid_argument("held-out split requested but no held-out attribute triples are defined");
  }
  for (std::uint64_t k = 0; k < 1000; ++k) {
    Rng rng(derive_seed(seed, 0x5ce7e, k));
    if (auto scene = try_generate(grammar, rng, height, width, split)) return *std::move(scene);
  }
  throw SceneGenerationError("could not place a scene for seed " + std::to_string(seed));
}

// ------------------------------------------------------------------ images

ImageFormatError::ImageFormatError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct Header {
  std::size_t width = 0, height = 0;
  std::size_t data_offset = 0;
};

Header parse_header(const std::string& b, const char* magic) {
  std::size_t pos = 0;
  if (b.size() < 2) throw ImageFormatError("truncated header: missing magic", b.size());
  if (b.compare(0, 2, magic) != 0) throw ImageFormatError(std::string("expected magic ") + magic, 0);
  pos = 2;
  auto skip_space = [&] {
    for (;;) {
      while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      return;
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= b.size()) throw ImageFormatError(std::string("truncated header: missing ") + what, pos);
    if (!std::isdigit(static_cast<unsigned char>(b[pos]))) {
      throw ImageFormatError(std::string("expected ") + what, pos);
    }
    std::size_t v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + static_cast<std::size_t>(b[pos] - '0');
      if (v > (1u << 24)) throw ImageFormatError(std::string(what) + " out of range", pos);
      ++pos;
    }
    return v;
  };
  Header h;
  h.width = number("width");
  h.height = number("height");
  const std::size_t maxval_at = pos;
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw ImageFormatError("only maxval 255 is supported", maxval_at);
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos]))) {
    throw ImageFormatError("truncated header: missing separator before pixel data", pos);
  }
  h.data_offset = pos + 1;
  if (h.width == 0 || h.height == 0) throw ImageFormatError("empty image", maxval_at);
  return h;
}

}  // namespace

SceneImage parse_ppm(const std::string& bytes) {
  const auto h = parse_header(bytes, "P6");
  const std::size_t need = h.width * h.height * 3;
  if (bytes.size() - h.data_offset < need) {
    throw ImageFormatError("truncated pixel data: need " + std::to_string(need) + " bytes", bytes.size());
  }
  SceneImage img;
  img.height = h.height;
  img.width = h.width;
  img.pixels.resize(need);
  for (std::size_t i = 0; i < need; ++i)
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[h.data_offset + i])) / 255.0f;
  return img;
}

std::vector<std::uint8_t> parse_pgm(const std::string& bytes, std::size_t& height, std::size_t& width) {
  const auto h = parse_header(bytes, "P5");
  const std::size_t need = h.width * h.height;
  if (bytes.size() - h.data_offset < need) {
    throw ImageFormatError("truncated pixel data: need " + std::to_string(need) + " bytes", bytes.size());
  }
  height = h.height;
  width = h.width;
  return {bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
          bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + need)};
}

void write_ppm(const std::filesystem::path& path, const SceneImage& img) {
  std::string b = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  b.reserve(b.size() + img.pixels.size());
  for (float v : img.pixels) b.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  write_file(path, b);
}

SceneImage read_ppm(const std::filesystem::path& path) { return parse_ppm(read_file(path)); }

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray) {
  if (gray.size() != height * width) throw std::invalid_argument("graymap size mismatch");
  std::string b = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  b.append(gray.begin(), gray.end());
  write_file(path, b);
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  return parse_pgm(read_file(path), height, width);
}

namespace {

constexpr int kNoColor = -1;

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

// Palette index of every pixel, or kNoColor.
std::vector<int> palette_map(const SceneImage& img) {
  const std::size_t n = img.height * img.width;
  std::vector<int> out(n, kNoColor);
  for (std::size_t i = 0; i < n; ++i) {
    const std::array<std::uint8_t, 3> rgb{to_byte(img.pixels[i * 3]), to_byte(img.pixels[i * 3 + 1]),
                                          to_byte(img.pixels[i * 3 + 2])};
    for (std::size_t c = 0; c < kPalette.size(); ++c)
      if (rgb == kPalette[c]) out[i] = static_cast<int>(c);
  }
  return out;
}

bool is_background(const SceneImage& img, std::size_t i) {
  for (std::size_t c = 0; c < 3; ++c)
    if (to_byte(img.pixels[i * 3 + c]) != kBackground) return false;
  return true;
}

std::string replace_words(const std::string& text, const std::function<std::string(const std::string&)>& f) {
  std::istringstream words(text);
  std::string word, out;
  while (words >> word) out += (out.empty() ? "" : " ") + f(word);
  return out;
}

}  // namespace

Sample mirror_sample(const Sample& sample) {
  Sample out = sample;
  const std::size_t h = sample.image.height, w = sample.image.width;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t src = y * w + (w - 1 - x), dst = y * w + x;
      out.mask[dst] = sample.mask[src];
      for (std::size_t c = 0; c < 3; ++c) out.image.pixels[dst * 3 + c] = sample.image.pixels[src * 3 + c];
    }
  out.expression = replace_words(sample.expression, [](const std::string& word) -> std::string {
    if (word == "left") return "right";
    if (word == "right") return "left";
    return word;
  });
  return out;
}

std::vector<SceneObject> detect_objects(const SceneImage& image) {
  const std::size_t h = image.height, w = image.width;
  const auto colors = palette_map(image);
  std::vector<std::uint8_t> seen(h * w, 0);
  std::vector<SceneObject> out;
  const double scale = static_cast<double>(std::min(h, w)) / 64.0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (seen[start] || colors[start] == kNoColor) continue;
    const int color = colors[start];
    std::size_t area = 0, x0 = w, x1 = 0, y0 = h, y1 = 0;
    double sx = 0, sy = 0;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / w, x = i % w;
      ++area;
      sx += static_cast<double>(x) + 0.5;
      sy += static_cast<double>(y) + 0.5;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
      auto visit = [&](std::size_t j) {
        if (!seen[j] && colors[j] == color) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
    }
    const double bw = static_cast<double>(x1 - x0 + 1), bh = static_cast<double>(y1 - y0 + 1);
    const double fill = static_cast<double>(area) / (bw * bh);
    SceneObject o;
    o.color = static_cast<Color>(color);
    o.cx = sx / static_cast<double>(area);
    o.cy = sy / static_cast<double>(area);
    if (fill > 0.9) {
      o.shape = ShapeKind::square;
      o.radius = bw / (2 * kSquareHalf);
    } else if (fill > 0.64) {
      o.shape = ShapeKind::circle;
      o.radius = bw / 2;
    } else {
      o.shape = ShapeKind::triangle;
      o.radius = bw / (2 * kSqrt3Half);
    }
    // Small radii are drawn from [7, 9], large from [12, 15] at 64 px.
    o.size = o.radius < 10.5 * scale ? Size::small : Size::large;
    out.push_back(o);
  }
  return out;
}

std::optional<Sample> recolor_sample(const Sample& sample, const std::array<Color, 4>& perm,
                                     const SceneGrammar& grammar) {
  for (auto o : detect_objects(sample.image)) {
    o.color = perm[static_cast<std::size_t>(o.color)];
    if (!grammar.is_held_out(o)) continue;
    const auto w = sample.image.width;
    const bool referent = sample.mask[static_cast<std::size_t>(o.cy) * w + static_cast<std::size_t>(o.cx)] != 0;
    if (referent || !grammar.held_out_distractors) return std::nullopt;
  }
  Sample out = sample;
  const auto colors = palette_map(sample.image);
  for (std::size_t i = 0; i < colors.size(); ++i) {
    if (colors[i] == kNoColor) continue;
    const auto& rgb = kPalette[static_cast<std::size_t>(perm[static_cast<std::size_t>(colors[i])])];
    for (std::size_t c = 0; c < 3; ++c) out.image.pixels[i * 3 + c] = static_cast<float>(rgb[c]) / 255.0f;
  }
  out.expression = replace_words(sample.expression, [&](const std::string& word) {
    for (std::size_t c = 0; c < perm.size(); ++c)
      if (word == to_string(static_cast<Color>(c))) return to_string(perm[c]);
    return word;
  });
  return out;
}

Sample shift_sample(const Sample& sample, int dx, int dy) {
  const auto h = static_cast<long>(sample.image.height), w = static_cast<long>(sample.image.width);
  Sample out = sample;
  std::fill(out.image.pixels.begin(), out.image.pixels.end(), static_cast<float>(kBackground) / 255.0f);
  std::fill(out.mask.begin(), out.mask.end(), std::uint8_t{0});
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const auto src = static_cast<std::size_t>(y * w + x);
      if (is_background(sample.image, src) && !sample.mask[src]) continue;
      const long ty = y + dy, tx = x + dx;
      if (ty < 0 || ty >= h || tx < 0 || tx >= w) throw std::invalid_argument("shift moves content out of frame");
      const auto dst = static_cast<std::size_t>(ty * w + tx);
      out.mask[dst] = sample.mask[src];
      for (std::size_t c = 0; c < 3; ++c) out.image.pixels[dst * 3 + c] = sample.image.pixels[src * 3 + c];
    }
  return out;
}

Sample augment_sample(const Sample& sample, const AugmentConfig& cfg, std::uint64_t seed, const SceneGrammar& grammar) {
  Rng rng(seed);
  Sample out = sample;
  if (cfg.mirror && (rng() & 1)) out = mirror_sample(out);
  if (cfg.recolor) {
    std::array<Color, 4> perm{Color::red, Color::green, Color::blue, Color::yellow};
    std::vector<std::array<Color, 4>> allowed;
    do {
      allowed.push_back(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));
    std::vector<Sample> options;
    for (const auto& p : allowed)
      if (auto s = recolor_sample(out, p, grammar)) options.push_back(std::move(*s));
    // The identity permutation is always among the options.
    out = std::move(options[pick(rng, options.size())]);
  }
  if (cfg.shift) {
    const std::size_t h = out.image.height, w = out.image.width;
    std::size_t x0 = w, x1 = 0, y0 = h, y1 = 0;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (is_background(out.image, i) && !out.mask[i]) continue;
      x0 = std::min(x0, i % w);
      x1 = std::max(x1, i % w);
      y0 = std::min(y0, i / w);
      y1 = std::max(y1, i / w);
    }
    if (x0 <= x1) {
      const auto lo_x = -static_cast<long>(x0), hi_x = static_cast<long>(w - 1 - x1);
      const auto lo_y = -static_cast<long>(y0), hi_y = static_cast<long>(h - 1 - y1);
      const auto dx = lo_x + static_cast<long>(pick(rng, static_cast<std::size_t>(hi_x - lo_x + 1)));
      const auto dy = lo_y + static_cast<long>(pick(rng, static_cast<std::size_t>(hi_y - lo_y + 1)));
      out = shift_sample(out, static_cast<int>(dx), static_cast<int>(dy));
    }
  }
  return out;
}

void save_sample(const std::filesystem::path& dir, const Sample& sample) {
  std::filesystem::create_directories(dir);
  write_ppm(dir / "image.ppm", sample.image);
  std::vector<std::uint8_t> gray(sample.mask.size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = sample.mask[i] ? 255 : 0;
  write_pgm(dir / "mask.pgm", sample.image.height, sample.image.width, gray);
  write_file(dir / "expression.txt", sample.expression + "\n");
}

Sample load_sample(const std::filesystem::path& dir) {
  Sample s;
  s.image = read_ppm(dir / "image.ppm");
  std::size_t h = 0, w = 0;
  auto gray = read_pgm(dir / "mask.pgm", h, w);
  if (h != s.image.height || w != s.image.width) {
    throw std::runtime_error("mask size does not match image in " + dir.string());
  }
  s.mask.resize(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i) s.mask[i] = gray[i] >= 128 ? 1 : 0;
  auto text = read_file(dir / "expression.txt");
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  s.expression = text;
  return s;
}

// ---------------------------------------------------------------- manifest

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::string b;
  for (const auto& e : entries) {
    for (const auto* f : {&e.path, &e.split, &e.expression}) {
      if (f->find_first_of("\t\n") != std::string::npos) throw std::invalid_argument("manifest field contains a tab");
    }
    b += e.path + "\t" + e.split + "\t" + e.expression + "\n";
  }
  write_file(path, b);
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    out.push_back({line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)});
  }
  return out;
}

std::uint64_t scene_seed(std::uint64_t root, SplitKind split, std::size_t index) {
  const std::uint64_t base = split == SplitKind::train ? 0 : (std::uint64_t{1} << 40);
  return derive_seed(root, SeedPurpose::data, base + index);
}

std::vector<Sample> generate_samples(const DatasetSpec& spec, SplitKind split, const SceneGrammar& grammar) {
  const std::size_t n = split == SplitKind::train ? spec.train : spec.val;
  std::vector<Sample> out(n);
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      out[i] = generate_scene(grammar, scene_seed(spec.seed, split, i), spec.image_size, spec.image_size, split).sample;
    } catch (...) {
#pragma omp critical
      error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

std::vector<ManifestEntry> generate_dataset(const std::filesystem::path& out, const DatasetSpec& spec,
                                            const SceneGrammar& grammar) {
  std::vector<ManifestEntry> entries;
  for (auto split : {SplitKind::train, SplitKind::held_out}) {
    const std::string name = split == SplitKind::train ? "train" : "val";
    const auto samples = generate_samples(spec, split, grammar);
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char dir[32];
      std::snprintf(dir, sizeof dir, "%05zu", i);
      try {
        save_sample(out / name / dir, samples[i]);
      } catch (...) {
#pragma omp critical
        error = std::current_exception();
      }
    }
    if (error) std::rethrow_exception(error);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char dir[32];
      std::snprintf(dir, sizeof dir, "%05zu", i);
      entries.push_back({name + "/" + dir, name, samples[i].expression});
    }
  }
  write_manifest(out / kManifestName, entries);
  return entries;
}

std::vector<Sample> load_split(const std::filesystem::path& manifest, const std::string& split) {
  if (split != "train" && split != "val" && split != "all")
    throw std::invalid_argument("unknown split '" + split + "' (train, val or all)");
  const auto root = manifest.parent_path();
  std::vector<Sample> out;
  for (const auto& e : read_manifest(manifest)) {
    if (split != "all" && e.split != split) continue;
    out.push_back(load_sample(root / e.path));
  }
  return out;
}

}  // namespace vipa
