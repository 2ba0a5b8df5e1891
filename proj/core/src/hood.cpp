#include "shiftlab/hood.hpp"

#include "shiftlab/dataset_io.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/optim.hpp"
#include "shiftlab/toy_models.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

namespace shiftlab::hood {

namespace fs = std::filesystem;

namespace {

enum Slot : std::size_t {
  kCMuW, kCMuB, kCLvW, kCLvB,
  kSMuW, kSMuB, kSLvW, kSLvB,
  kFcW, kFcB, kFsW, kFsB,
  kDecW, kDecB,
  kO1W, kO1B, kO2W, kO2B,
  kSlots
};

Matrix lecun(int fan_in, int fan_out, double scale, Rng& rng) {
  std::normal_distribution<double> n(0.0, scale / std::sqrt(static_cast<double>(fan_in)));
  Matrix w(fan_in, fan_out);
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = n(rng);
  }
  return w;
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix z = x * w;
  z.rowwise() += b.row(0);
  return z;
}

ad::Var affine(ad::Var x, ad::Var w, ad::Var b) { return ad::add_row(ad::matmul(x, w), b); }

// ce - relu(ce - cap): per-example cross-entropy capped at `cap`.
ad::Var capped(ad::Var ce, double cap) { return ad::sub(ce, ad::relu(ad::add_scalar(ce, -cap))); }

void check_labels(std::span<const int> labels, int count, const char* what) {
  for (int v : labels) {
    if (v < 0 || v >= count) throw DomainError(std::string(what) + " label out of range");
  }
}

}  // namespace

VibModel::VibModel(const VibSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.input_dim < 1 || spec.latent < 1 || spec.classes < 2 || spec.domains < 2 ||
      spec.ova_hidden < 1) {
    throw DomainError("VibModel: invalid dimensions");
  }
  const int d = spec.input_dim;
  const int l = spec.latent;
  const double s = spec.init_scale;
  tensors_.resize(kSlots);
  tensors_[kCMuW] = lecun(d, l, s, rng);
  tensors_[kCMuB] = Matrix::Zero(1, l);
  tensors_[kCLvW] = lecun(d, l, 0.1 * s, rng);
  tensors_[kCLvB] = Matrix::Zero(1, l);
  tensors_[kSMuW] = lecun(d, l, s, rng);
  tensors_[kSMuB] = Matrix::Zero(1, l);
  tensors_[kSLvW] = lecun(d, l, 0.1 * s, rng);
  tensors_[kSLvB] = Matrix::Zero(1, l);
  tensors_[kFcW] = lecun(l, spec.classes, s, rng);
  tensors_[kFcB] = Matrix::Zero(1, spec.classes);
  tensors_[kFsW] = lecun(l, spec.domains, s, rng);
  tensors_[kFsB] = Matrix::Zero(1, spec.domains);
  tensors_[kDecW] = lecun(2 * l, d, s, rng);
  tensors_[kDecB] = Matrix::Zero(1, d);
  tensors_[kO1W] = lecun(l, spec.ova_hidden, s, rng);
  tensors_[kO1B] = Matrix::Zero(1, spec.ova_hidden);
  tensors_[kO2W] = Matrix::Zero(spec.ova_hidden, spec.classes);
  tensors_[kO2B] = Matrix::Zero(1, spec.classes);
}

std::size_t VibModel::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
  return n;
}

Vector VibModel::flat() const {
  Vector out(static_cast<Eigen::Index>(count()));
  Eigen::Index off = 0;
  for (const auto& t : tensors_) {
    out.segment(off, t.size()) = Eigen::Map<const Vector>(t.data(), t.size());
    off += t.size();
  }
  return out;
}

void VibModel::set_flat(const Vector& values) {
  if (static_cast<std::size_t>(values.size()) != count()) {
    throw DomainError("VibModel::set_flat: length mismatch");
  }
  Eigen::Index off = 0;
  for (auto& t : tensors_) {
    t = Eigen::Map<const Matrix>(values.data() + off, t.rows(), t.cols());
    off += t.size();
  }
}

VibModel::Bound VibModel::bind(ad::Tape& tape, bool trainable) const {
  Bound out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(trainable ? tape.variable(t) : tape.constant(t));
  return out;
}

VibModel::Stats VibModel::encode_content(const Bound& p, ad::Var x) const {
  return {affine(x, p[kCMuW], p[kCMuB]), affine(x, p[kCLvW], p[kCLvB])};
}

VibModel::Stats VibModel::encode_style(const Bound& p, ad::Var x) const {
  return {affine(x, p[kSMuW], p[kSMuB]), affine(x, p[kSLvW], p[kSLvB])};
}

ad::Var VibModel::content_head(const Bound& p, ad::Var z) const { return affine(z, p[kFcW], p[kFcB]); }
ad::Var VibModel::style_head(const Bound& p, ad::Var z) const { return affine(z, p[kFsW], p[kFsB]); }

ad::Var VibModel::decode(const Bound& p, ad::Var c, ad::Var s) const {
  return affine(ad::hcat(c, s), p[kDecW], p[kDecB]);
}

ad::Var VibModel::ova_logits(const Bound& p, ad::Var mu) const {
  return affine(ad::tanh(affine(mu, p[kO1W], p[kO1B])), p[kO2W], p[kO2B]);
}

Vector VibModel::gather_grad(const Bound& p) const {
  Vector out(static_cast<Eigen::Index>(count()));
  Eigen::Index off = 0;
  for (const auto& v : p) {
    const Matrix& g = v.grad();
    out.segment(off, g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
    off += g.size();
  }
  return out;
}

Matrix VibModel::content_mean(const Matrix& x) const {
  if (x.cols() != spec_.input_dim) throw DomainError("VibModel: input width mismatch");
  return affine(x, tensors_[kCMuW], tensors_[kCMuB]);
}

Matrix VibModel::style_mean(const Matrix& x) const {
  if (x.cols() != spec_.input_dim) throw DomainError("VibModel: input width mismatch");
  return affine(x, tensors_[kSMuW], tensors_[kSMuB]);
}

Matrix VibModel::content_logits(const Matrix& x) const {
  return affine(content_mean(x), tensors_[kFcW], tensors_[kFcB]);
}

Matrix VibModel::style_logits(const Matrix& x) const {
  return affine(style_mean(x), tensors_[kFsW], tensors_[kFsB]);
}

Matrix VibModel::ova_probs(const Matrix& x) const {
  const Matrix h = affine(content_mean(x), tensors_[kO1W], tensors_[kO1B]).array().tanh();
  const Matrix z = affine(h, tensors_[kO2W], tensors_[kO2B]);
  return (1.0 + (-z.array()).exp()).inverse();
}

double kl_standard_normal(const Matrix& mu, const Matrix& logvar) {
  if (mu.rows() == 0) return 0.0;
  const double kl =
      0.5 * (mu.array().square() + logvar.array().exp() - logvar.array() - 1.0).sum() /
      static_cast<double>(mu.rows());
  if (!std::isfinite(kl)) throw NumericError("KL divergence is not finite");
  return kl;
}

Matrix reparameterize(const Matrix& mu, const Matrix& logvar, const Matrix& noise) {
  return mu.array() + (0.5 * logvar.array()).exp() * noise.array();
}

ElboNoise ElboNoise::draw(std::size_t rows, int latent, int samples, Rng& rng) {
  std::normal_distribution<double> nd;
  auto gen = [&] {
    Matrix m(static_cast<Eigen::Index>(rows), latent);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = nd(rng);
    }
    return m;
  };
  ElboNoise n;
  for (int k = 0; k < samples; ++k) {
    n.content.push_back(gen());
    n.style.push_back(gen());
  }
  return n;
}

ad::Var elbo_graph(const VibModel& model, const VibModel::Bound& p, ad::Var x,
                   std::span<const int> y, std::span<const int> d, const ElboNoise& noise,
                   const ElboWeights& w, ElboTerms* terms) {
  const auto& spec = model.spec();
  const auto n = static_cast<std::size_t>(x.rows());
  if (y.size() != n || d.size() != n) throw DomainError("elbo: labels y and d required per row");
  if (noise.content.empty() || noise.content.size() != noise.style.size()) {
    throw DomainError("elbo: at least one noise draw required");
  }
  check_labels(y, spec.classes, "class");
  check_labels(d, spec.domains, "domain");
  ad::Tape& tape = *x.tape;
  const double inv_n = 1.0 / static_cast<double>(n);

  auto kl = [&](const VibModel::Stats& st) {
    ad::Var e = ad::add_scalar(ad::sub(ad::add(ad::square(st.mu), ad::exp(st.logvar)), st.logvar), -1.0);
    return ad::scale(ad::sum(e), 0.5 * inv_n);
  };

  // The crossed terms reach the encoders only; the heads keep fitting their
  // own latent.
  VibModel::Bound crossed = p;
  for (const auto k : {kFcW, kFcB, kFsW, kFsB}) crossed[k] = tape.constant(p[k].value());

  const auto cs = model.encode_content(p, x);
  const auto ss = model.encode_style(p, x);
  ad::Var kl_c = kl(cs);
  ad::Var kl_s = kl(ss);
  if (!std::isfinite(kl_c.scalar()) || !std::isfinite(kl_s.scalar())) {
    throw NumericError("elbo: KL divergence is not finite");
  }

  const double cap_d = std::log(static_cast<double>(spec.domains));
  const double cap_y = std::log(static_cast<double>(spec.classes));
  const auto k = noise.content.size();
  const double inv_k = 1.0 / static_cast<double>(k);

  ad::Var content_term;
  ad::Var style_term;
  ad::Var recon;
  ad::Var content_total;  // with the disentanglement weight applied
  ad::Var style_total;
  for (std::size_t s = 0; s < k; ++s) {
    ad::Var c = ad::add(cs.mu, ad::mul(ad::exp(ad::scale(cs.logvar, 0.5)), noise.content[s]));
    ad::Var z = ad::add(ss.mu, ad::mul(ad::exp(ad::scale(ss.logvar, 0.5)), noise.style[s]));
    ad::Var ce_yc = ad::mean(ad::cross_entropy(model.content_head(p, c), y));
    ad::Var ce_dc = ad::mean(capped(ad::cross_entropy(model.style_head(crossed, c), d), cap_d));
    ad::Var ce_ds = ad::mean(ad::cross_entropy(model.style_head(p, z), d));
    ad::Var ce_ys = ad::mean(capped(ad::cross_entropy(model.content_head(crossed, z), y), cap_y));
    ad::Var err = ad::sub(x, model.decode(p, c, z));
    ad::Var rec = ad::scale(ad::sum(ad::square(err)), -inv_n * inv_k);

    ad::Var ct = ad::scale(ad::sub(ce_dc, ce_yc), inv_k);
    ad::Var st = ad::scale(ad::sub(ce_ys, ce_ds), inv_k);
    ad::Var ctw = ad::scale(ad::sub(ad::scale(ce_dc, w.disentangle), ce_yc), inv_k);
    ad::Var stw = ad::scale(ad::sub(ad::scale(ce_ys, w.disentangle), ce_ds), inv_k);
    if (s == 0) {
      content_term = ct;
      style_term = st;
      recon = rec;
      content_total = ctw;
      style_total = stw;
    } else {
      content_term = ad::add(content_term, ct);
      style_term = ad::add(style_term, st);
      recon = ad::add(recon, rec);
      content_total = ad::add(content_total, ctw);
      style_total = ad::add(style_total, stw);
    }
  }

  ad::Var total = ad::add(ad::add(content_total, style_total),
                          ad::sub(ad::scale(recon, w.reconstruction),
                                  ad::scale(ad::add(kl_c, kl_s), w.kl)));
  if (terms) {
    terms->total = total.scalar();
    terms->kl_content = kl_c.scalar();
    terms->kl_style = kl_s.scalar();
    terms->content_term = content_term.scalar();
    terms->style_term = style_term.scalar();
    terms->reconstruction = recon.scalar();
  }
  return total;
}

ElboTerms elbo(const VibModel& model, const Matrix& x, std::span<const int> y,
               std::span<const int> d, const ElboNoise& noise, const ElboWeights& w) {
  ad::Tape tape;
  const auto p = model.bind(tape, false);
  ElboTerms t;
  elbo_graph(model, p, tape.constant(x), y, d, noise, w, &t);
  return t;
}

// Augmentation -------------------------------------------------------------------

Matrix pgd_minimize(const InputObjective& objective, const Matrix& x0, double epsilon, int steps) {
  if (!(epsilon > 0.0)) throw DomainError("pgd_minimize: epsilon must be positive");
  if (steps < 0) throw DomainError("pgd_minimize: steps must be >= 0");
  const double budget = epsilon * steps;
  Matrix x = x0;
  for (int s = 0; s < steps; ++s) {
    Matrix g;
    objective(x, &g);
    if (g.rows() != x.rows() || g.cols() != x.cols()) {
      throw DomainError("pgd_minimize: gradient shape mismatch");
    }
    if (!g.allFinite()) throw NumericError("pgd_minimize: non-finite gradient");
    x.array() -= epsilon * g.array().sign();
    x = x0.array() + (x - x0).array().max(-budget).min(budget);
  }
  return x;
}

namespace {

// sum_i ||keep(x0_i) - keep(x_i)||^2 + sign * CE(head(x_i), target_i)
InputObjective make_objective(const VibModel& model, const Matrix& x0, std::span<const int> target,
                              bool keep_content, double ce_sign) {
  const Matrix anchor = keep_content ? model.content_mean(x0) : model.style_mean(x0);
  std::vector<int> labels(target.begin(), target.end());
  return [&model, anchor, labels = std::move(labels), keep_content, ce_sign](const Matrix& x,
                                                                             Matrix* grad) {
    ad::Tape tape;
    const auto p = model.bind(tape, false);
    ad::Var xv = tape.variable(x);
    const auto cs = model.encode_content(p, xv);
    const auto ss = model.encode_style(p, xv);
    ad::Var kept = keep_content ? cs.mu : ss.mu;
    ad::Var dist = ad::sum(ad::square(ad::sub(kept, tape.constant(anchor))));
    ad::Var logits = keep_content ? model.style_head(p, ss.mu) : model.content_head(p, cs.mu);
    ad::Var ce = ad::sum(ad::cross_entropy(logits, labels));
    ad::Var obj = ad::add(dist, ad::scale(ce, ce_sign));
    if (grad) {
      tape.backward(obj);
      *grad = xv.grad();
    }
    return obj.scalar();
  };
}

}  // namespace

InputObjective positive_objective(const VibModel& model, const Matrix& x0, std::span<const int> d,
                                  bool targeted) {
  if (d.size() != static_cast<std::size_t>(x0.rows())) throw DomainError("one domain label per row");
  check_labels(d, model.spec().domains, "domain");
  return make_objective(model, x0, d, true, targeted ? 1.0 : -1.0);
}

InputObjective negative_objective(const VibModel& model, const Matrix& x0, std::span<const int> y) {
  if (y.size() != static_cast<std::size_t>(x0.rows())) throw DomainError("one class label per row");
  check_labels(y, model.spec().classes, "class");
  return make_objective(model, x0, y, false, -1.0);
}

Matrix positive_augment(const VibModel& model, const Matrix& x, std::span<const int> d,
                        const AugmentOptions& opt) {
  return pgd_minimize(positive_objective(model, x, d, false), x, opt.epsilon, opt.steps);
}

Matrix positive_augment_targeted(const VibModel& model, const Matrix& x,
                                 std::span<const int> d_prime, const AugmentOptions& opt) {
  return pgd_minimize(positive_objective(model, x, d_prime, true), x, opt.epsilon, opt.steps);
}

Matrix negative_augment(const VibModel& model, const Matrix& x, std::span<const int> y,
                        const AugmentOptions& opt) {
  return pgd_minimize(negative_objective(model, x, y), x, opt.epsilon, opt.steps);
}

AugmentedPair AugmentedPool::pair(std::size_t i) const {
  const auto r = static_cast<Eigen::Index>(i);
  return {x_bar.row(r).transpose(), x_hat.row(r).transpose(), source.at(i), steps, epsilon};
}

AugmentedPool build_pool(const VibModel& model, const Matrix& x, std::span<const int> y,
                         std::span<const int> d, std::span<const std::size_t> source,
                         const AugmentOptions& opt) {
  AugmentedPool pool;
  pool.x_bar = positive_augment(model, x, d, opt);
  pool.x_hat = negative_augment(model, x, y, opt);
  pool.y.assign(y.begin(), y.end());
  pool.d.assign(d.begin(), d.end());
  pool.source.assign(source.begin(), source.end());
  pool.steps = opt.steps;
  pool.epsilon = opt.epsilon;
  return pool;
}

namespace {

template <typename T>
std::string as_bytes(const T* data, std::size_t count) {
  return std::string(reinterpret_cast<const char*>(data), count * sizeof(T));
}

template <typename T>
std::vector<T> read_array(const fs::path& file, std::size_t expected) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<T> out(expected);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(expected * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != expected * sizeof(T)) {
    throw IoError("truncated file " + file.string());
  }
  return out;
}

std::string row_major(const Matrix& m) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m;
  return as_bytes(r.data(), static_cast<std::size_t>(r.size()));
}

Matrix from_row_major(const std::vector<double>& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      v.data(), rows, cols);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

void save_pool(const AugmentedPool& pool, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  const std::vector<std::int32_t> y(pool.y.begin(), pool.y.end());
  const std::vector<std::int32_t> d(pool.d.begin(), pool.d.end());
  const std::vector<std::uint64_t> src(pool.source.begin(), pool.source.end());
  io::write_file_atomic(dir / "x_bar.f64", row_major(pool.x_bar));
  io::write_file_atomic(dir / "x_hat.f64", row_major(pool.x_hat));
  io::write_file_atomic(dir / "y.i32", as_bytes(y.data(), y.size()));
  io::write_file_atomic(dir / "d.i32", as_bytes(d.data(), d.size()));
  io::write_file_atomic(dir / "source.u64", as_bytes(src.data(), src.size()));
  io::write_manifest(dir / "manifest.txt", {{"format", "1"},
                                             {"kind", "augmented_pool"},
                                             {"n", std::to_string(pool.size())},
                                             {"dim", std::to_string(pool.x_bar.cols())},
                                             {"steps", std::to_string(pool.steps)},
                                             {"epsilon", format_double(pool.epsilon)}});
}

AugmentedPool load_pool(const fs::path& dir) {
  const auto m = io::read_manifest(dir / "manifest.txt");
  auto get = [&](const std::string& k) {
    auto it = m.find(k);
    if (it == m.end()) throw IoError("pool manifest missing '" + k + "'");
    return it->second;
  };
  if (get("kind") != "augmented_pool" || get("format") != "1") {
    throw IoError("unsupported pool format in " + dir.string());
  }
  const std::size_t n = std::stoull(get("n"));
  const auto dim = static_cast<Eigen::Index>(std::stoll(get("dim")));
  AugmentedPool pool;
  pool.steps = std::stoi(get("steps"));
  pool.epsilon = std::stod(get("epsilon"));
  const auto rows = static_cast<Eigen::Index>(n);
  pool.x_bar = from_row_major(read_array<double>(dir / "x_bar.f64", n * static_cast<std::size_t>(dim)), rows, dim);
  pool.x_hat = from_row_major(read_array<double>(dir / "x_hat.f64", n * static_cast<std::size_t>(dim)), rows, dim);
  for (auto v : read_array<std::int32_t>(dir / "y.i32", n)) pool.y.push_back(v);
  for (auto v : read_array<std::int32_t>(dir / "d.i32", n)) pool.d.push_back(v);
  for (auto v : read_array<std::uint64_t>(dir / "source.u64", n)) pool.source.push_back(v);
  return pool;
}

// Scoring ------------------------------------------------------------------------

Vector hood_ood_score(const VibModel& model, const Matrix& x) {
  const Matrix probs = model.ova_probs(x);
  const auto pred = models::argmax_rows(model.content_logits(x));
  Vector out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = probs(i, pred[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<std::optional<int>> pseudo_labels(const VibModel& model, const Matrix& x, double floor) {
  const Matrix p = ad::softmax_rows(model.content_logits(x));
  const auto pred = models::argmax_rows(p);
  std::vector<std::optional<int>> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int k = pred[static_cast<std::size_t>(i)];
    if (p(i, k) >= floor) out[static_cast<std::size_t>(i)] = k;
  }
  return out;
}

// Toy data -----------------------------------------------------------------------

ToyData make_toy(std::size_t n, const ToySpec& spec, std::uint64_t seed, bool novel_style) {
  if (spec.content_dim < 1 || spec.style_dim < 1 || spec.classes < 2 || spec.domains < 2) {
    throw DomainError("make_toy: invalid spec");
  }
  const SeedSequence structure(spec.structure_seed);
  auto signs = [](int rows, int cols, double amp, Rng rng) {
    std::bernoulli_distribution coin(0.5);
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) m(i, j) = coin(rng) ? amp : -amp;
    }
    return m;
  };
  const Matrix protos = signs(spec.classes, spec.content_dim, spec.content_amplitude,
                              structure.stream("prototypes"));
  const Matrix patterns = signs(spec.domains, spec.style_dim, spec.style_amplitude,
                                structure.stream(novel_style ? "novel-patterns" : "patterns"));

  ToyData out;
  out.spec = spec;
  out.x.resize(static_cast<Eigen::Index>(n), spec.content_dim + spec.style_dim);
  out.y.resize(n);
  out.d.resize(n);
  Rng rng = SeedSequence(seed).stream(substream::kData);
  std::normal_distribution<double> noise(0.0, spec.noise);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    const int d = static_cast<int>((i / static_cast<std::size_t>(spec.classes)) %
                                   static_cast<std::size_t>(spec.domains));
    out.y[i] = y;
    out.d[i] = d;
    const auto r = static_cast<Eigen::Index>(i);
    for (int j = 0; j < spec.content_dim; ++j) out.x(r, j) = protos(y, j) + noise(rng);
    for (int j = 0; j < spec.style_dim; ++j) {
      out.x(r, spec.content_dim + j) = patterns(d, j) + noise(rng);
    }
  }
  return out;
}

// Training -----------------------------------------------------------------------

std::string to_string(AugMode m) {
  switch (m) {
    case AugMode::both: return "both";
    case AugMode::pos: return "pos";
    case AugMode::neg: return "neg";
    case AugMode::none: return "none";
  }
  return "unknown";
}

std::optional<AugMode> aug_mode_from_string(const std::string& name) {
  for (auto m : {AugMode::both, AugMode::pos, AugMode::neg, AugMode::none}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

namespace {

// Rejector targets: 0 for the labeled class, 1 elsewhere; all ones when
// `unknown`.
Matrix ova_targets(std::span<const int> y, int classes, bool unknown) {
  Matrix t = Matrix::Ones(static_cast<Eigen::Index>(y.size()), classes);
  if (!unknown) {
    for (std::size_t i = 0; i < y.size(); ++i) t(static_cast<Eigen::Index>(i), y[i]) = 0.0;
  }
  return t;
}

ad::Var ova_loss(const VibModel& model, const VibModel::Bound& p, ad::Tape& tape, const Matrix& x,
                 std::span<const int> y, bool unknown) {
  const int c = model.spec().classes;
  // Content means enter as constants: the rejectors do not shape the encoder.
  ad::Var mu = tape.constant(model.content_mean(x));
  const Matrix t = ova_targets(y, c, unknown);
  return ad::mean(ad::bce_with_logits(model.ova_logits(p, mu), t, Matrix::Ones(t.rows(), t.cols())));
}

double mean_of(const Vector& v) { return v.size() ? v.mean() : 0.0; }

double agreement(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return a.empty() ? 0.0 : static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace

HoodResult hood_train(const HoodConfig& cfg, const ToyData& train, const ToyData& test) {
  std::vector<std::string> problems;
  if (!(cfg.augment.epsilon > 0.0)) problems.push_back("epsilon must be positive");
  if (cfg.augment.steps < 0) problems.push_back("steps must be >= 0");
  if (cfg.iterations < 1) problems.push_back("iterations must be >= 1");
  if (!(cfg.aug_fraction >= 0.0 && cfg.aug_fraction <= 1.0)) problems.push_back("aug_fraction must lie in [0, 1]");
  if (!(cfg.unlabeled_fraction >= 0.0 && cfg.unlabeled_fraction < 1.0)) {
    problems.push_back("unlabeled_fraction must lie in [0, 1)");
  }
  if (cfg.elbo.samples < 1) problems.push_back("elbo samples must be >= 1");
  if (train.size() == 0) problems.push_back("training set is empty");
  if (!problems.empty()) throw ConfigError(problems);

  const SeedSequence seeds(cfg.seed);
  Rng init = seeds.stream(substream::kInit);
  Rng noise_rng = seeds.stream(substream::kTrain);
  Rng split_rng = seeds.stream(substream::kData);

  VibSpec spec = cfg.model;
  spec.input_dim = static_cast<int>(train.x.cols());
  spec.classes = train.spec.classes;
  spec.domains = train.spec.domains;
  HoodResult out{VibModel(spec, init), RunRecord{}, AugmentedPool{}};
  VibModel& model = out.model;
  RunRecord& rec = out.record;
  rec.algorithm = "hood";
  rec.seed = cfg.seed;

  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  std::bernoulli_distribution hide(cfg.unlabeled_fraction);
  for (std::size_t i = 0; i < train.size(); ++i) (hide(split_rng) ? unlabeled : labeled).push_back(i);
  if (labeled.empty()) throw ConfigError({"no labeled examples remain"});

  auto gather = [&](const std::vector<std::size_t>& rows, Matrix& x, std::vector<int>& y,
                    std::vector<int>& d) {
    x.resize(static_cast<Eigen::Index>(rows.size()), train.x.cols());
    y.clear();
    d.clear();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      x.row(static_cast<Eigen::Index>(k)) = train.x.row(static_cast<Eigen::Index>(rows[k]));
      y.push_back(train.y[rows[k]]);
      d.push_back(train.d[rows[k]]);
    }
  };
  Matrix xl;
  std::vector<int> yl;
  std::vector<int> dl;
  gather(labeled, xl, yl, dl);

  const bool use_pos = cfg.aug == AugMode::both || cfg.aug == AugMode::pos;
  const bool use_neg = cfg.aug == AugMode::both || cfg.aug == AugMode::neg;
  const long aug_at = cfg.aug == AugMode::none
                          ? -1
                          : std::max(1L, static_cast<long>(std::nearbyint(cfg.aug_fraction *
                                                                          static_cast<double>(cfg.iterations))));
  bool have_pool = false;

  optim::Sgd opt(cfg.lr, cfg.momentum);
  for (long t = 1; t <= cfg.iterations; ++t) {
    ad::Tape tape;
    const auto p = model.bind(tape, true);
    const ElboNoise noise = ElboNoise::draw(yl.size(), spec.latent, cfg.elbo.samples, noise_rng);
    ElboTerms terms;
    ad::Var objective = elbo_graph(model, p, tape.constant(xl), yl, dl, noise, cfg.elbo, &terms);
    ad::Var loss = ad::neg(objective);
    ad::Var ova = ova_loss(model, p, tape, xl, yl, false);
    double aug_ce = 0.0;
    if (have_pool) {
      const AugmentedPool& pool = out.pool;
      if (use_pos) {
        ad::Var mu = model.encode_content(p, tape.constant(pool.x_bar)).mu;
        ad::Var ce = ad::mean(ad::cross_entropy(model.content_head(p, mu), pool.y));
        aug_ce = ce.scalar();
        loss = ad::add(loss, ad::scale(ce, cfg.aug_weight));
        ova = ad::add(ova, ova_loss(model, p, tape, pool.x_bar, pool.y, false));
      }
      if (use_neg) ova = ad::add(ova, ova_loss(model, p, tape, pool.x_hat, pool.y, true));
    }
    loss = ad::add(loss, ad::scale(ova, cfg.ova_weight));
    tape.backward(loss);
    if (!std::isfinite(loss.scalar())) {
      throw NumericError("hood_train: non-finite loss at iteration " + std::to_string(t));
    }
    Vector theta = model.flat();
    opt.step(theta, model.gather_grad(p));
    model.set_flat(theta);

    if (t == aug_at) {
      std::vector<std::size_t> rows = labeled;
      Matrix xa;
      std::vector<int> ya;
      std::vector<int> da;
      gather(labeled, xa, ya, da);
      if (!unlabeled.empty()) {
        Matrix xu;
        std::vector<int> yu;
        std::vector<int> du;
        gather(unlabeled, xu, yu, du);
        const auto pl = pseudo_labels(model, xu, cfg.pseudo_label_floor);
        std::vector<std::size_t> keep;
        for (std::size_t k = 0; k < pl.size(); ++k) {
          if (!pl[k]) continue;
          rows.push_back(unlabeled[k]);
          ya.push_back(*pl[k]);
          da.push_back(du[k]);
          keep.push_back(k);
        }
        const Eigen::Index base = xa.rows();
        xa.conservativeResize(base + static_cast<Eigen::Index>(keep.size()), Eigen::NoChange);
        for (std::size_t k = 0; k < keep.size(); ++k) {
          xa.row(base + static_cast<Eigen::Index>(k)) = xu.row(static_cast<Eigen::Index>(keep[k]));
        }
      }
      out.pool = build_pool(model, xa, ya, da, rows, cfg.augment);
      have_pool = true;
    }

    if (cfg.log_every > 0 && (t % cfg.log_every == 0 || t == cfg.iterations)) {
      MetricRow& row = rec.add_row(t);
      row.scalars["elbo"] = terms.total;
      row.scalars["kl_content"] = terms.kl_content;
      row.scalars["kl_style"] = terms.kl_style;
      row.scalars["content_term"] = terms.content_term;
      row.scalars["style_term"] = terms.style_term;
      row.scalars["reconstruction"] = terms.reconstruction;
      row.scalars["ova_loss"] = ova.scalar();
      row.scalars["aug_ce"] = aug_ce;
      row.scalars["loss"] = loss.scalar();
    }
  }

  const ToyData& eval = test.size() ? test : train;
  const auto content_pred = models::argmax_rows(model.content_logits(eval.x));
  const auto style_pred = models::argmax_rows(model.style_logits(eval.x));
  rec.set_summary("acc_content", agreement(content_pred, eval.y));
  rec.set_summary("acc_style", agreement(style_pred, eval.d));
  const ToyData shifted = make_toy(eval.size(), eval.spec, seeds.seed("style-shift"), true);
  rec.set_summary("acc_content_style_shift",
                  agreement(models::argmax_rows(model.content_logits(shifted.x)), shifted.y));

  const Matrix x_bar = positive_augment(model, eval.x, eval.d, cfg.augment);
  const Matrix x_hat = negative_augment(model, eval.x, eval.y, cfg.augment);
  const auto style_bar = models::argmax_rows(model.style_logits(x_bar));
  const auto style_hat = models::argmax_rows(model.style_logits(x_hat));
  rec.set_summary("neg_content_flip",
                  1.0 - agreement(models::argmax_rows(model.content_logits(x_hat)), content_pred));
  rec.set_summary("neg_style_kept", agreement(style_hat, style_pred));
  rec.set_summary("pos_style_flip", 1.0 - agreement(style_bar, style_pred));
  rec.set_summary("pos_content_kept",
                  agreement(models::argmax_rows(model.content_logits(x_bar)), content_pred));
  rec.set_summary("score_clean", mean_of(hood_ood_score(model, eval.x)));
  rec.set_summary("score_x_bar", mean_of(hood_ood_score(model, x_bar)));
  rec.set_summary("score_x_hat", mean_of(hood_ood_score(model, x_hat)));
  rec.set_summary("pool_size", static_cast<double>(out.pool.size()));
  return out;
}

}  // namespace shiftlab::hood
