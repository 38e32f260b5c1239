#include "cspd/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cspd {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'P', 'D', 'C', 'K', 'P', '1'};
constexpr std::uint8_t kKindModel = 0;
constexpr std::uint8_t kKindHead = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    raw(b, 4);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    raw(b, 8);
  }
  void mat(const Mat& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
  }
  void vec(const Vec& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("checkpoint: write failed");
  }
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open for read: " + path);
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    raw(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  double f64() {
    unsigned char b[8];
    raw(b, 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  Mat mat() {
    const auto rows = u32(), cols = u32();
    Mat m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = f64();
    return m;
  }
  Vec vec() {
    const auto n = u32();
    Vec v(n);
    for (std::uint32_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw std::runtime_error("checkpoint: truncated file");
  }
  std::ifstream in_;
};

std::uint8_t expect_header(Reader& r, std::uint8_t want_kind) {
  char magic[8];
  for (auto& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const std::uint8_t kind = r.u8();
  if (kind != want_kind)
    throw std::runtime_error("checkpoint: wrong artifact kind");
  return kind;
}

} // namespace

void save_checkpoint(const std::string& path, const ToyARModel& model) {
  Writer w(path);
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u8(kKindModel);
  w.u32(static_cast<std::uint32_t>(model.dim()));
  w.u32(static_cast<std::uint32_t>(model.heads()));
  w.u32(static_cast<std::uint32_t>(model.depth()));
  for (const auto& l : model.layers()) {
    w.mat(l.wq);
    w.mat(l.wk);
    w.mat(l.wv);
  }
  w.mat(model.head().mean_w);
  w.vec(model.head().mean_b);
  w.mat(model.head().logvar_w);
  w.vec(model.head().logvar_b);
}

ToyARModel load_model_checkpoint(const std::string& path) {
  Reader r(path);
  expect_header(r, kKindModel);
  const int dim = static_cast<int>(r.u32());
  const int heads = static_cast<int>(r.u32());
  const int depth = static_cast<int>(r.u32());
  std::vector<AttentionBlock> layers(depth);
  for (auto& l : layers) {
    l.wq = r.mat();
    l.wk = r.mat();
    l.wv = r.mat();
  }
  GaussianHead head;
  head.mean_w = r.mat();
  head.mean_b = r.vec();
  head.logvar_w = r.mat();
  head.logvar_b = r.vec();
  return ToyARModel(dim, heads, std::move(layers), std::move(head));
}

void save_checkpoint(const std::string& path, const DiffusionHead& head) {
  Writer w(path);
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u8(kKindHead);
  w.u32(static_cast<std::uint32_t>(head.dim()));
  w.u32(static_cast<std::uint32_t>(head.temb_dim()));
  w.u32(static_cast<std::uint32_t>(head.hidden()));
  w.u8(static_cast<std::uint8_t>(head.role()));
  w.u8(static_cast<std::uint8_t>(head.stage()));
  w.mat(head.w1);
  w.vec(head.b1);
  w.mat(head.w2);
  w.vec(head.b2);
}

DiffusionHead load_head_checkpoint(const std::string& path) {
  Reader r(path);
  expect_header(r, kKindHead);
  const int dim = static_cast<int>(r.u32());
  const int temb = static_cast<int>(r.u32());
  const int hidden = static_cast<int>(r.u32());
  const auto role = static_cast<HeadRole>(r.u8());
  const auto stage = static_cast<TrainStage>(r.u8());
  RandomSource scratch(0);
  DiffusionHead h(dim, temb, hidden, role, scratch);
  h.w1 = r.mat();
  h.b1 = r.vec();
  h.w2 = r.mat();
  h.b2 = r.vec();
  h.set_stage(stage);
  return h;
}

} // namespace cspd
