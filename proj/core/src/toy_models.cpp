#include "shiftlab/toy_models.hpp"

#include "shiftlab/dataset_io.hpp"
#include "shiftlab/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

namespace shiftlab::models {

std::string to_string(ExtractorKind kind) { return kind == ExtractorKind::linear ? "linear" : "mlp"; }

ExtractorKind extractor_kind_from_string(const std::string& name) {
  if (name == "linear") return ExtractorKind::linear;
  if (name == "mlp") return ExtractorKind::mlp;
  throw DomainError("unknown model kind '" + name + "'");
}

Batch Batch::subset(std::span<const std::size_t> rows) const {
  Batch out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.y.reserve(rows.size());
  if (!group.empty()) out.group.reserve(rows.size());
  if (!index.empty()) out.index.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.x.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(rows[k]));
    out.y.push_back(y.at(rows[k]));
    if (!group.empty()) out.group.push_back(group.at(rows[k]));
    if (!index.empty()) out.index.push_back(index.at(rows[k]));
  }
  return out;
}

namespace {

Matrix lecun(int fan_in, int fan_out, double scale, Rng& rng) {
  std::normal_distribution<double> n(0.0, scale / std::sqrt(static_cast<double>(fan_in)));
  Matrix w(fan_in, fan_out);
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = n(rng);
  }
  return w;
}

Matrix activate(const Matrix& z, Activation a) {
  if (a == Activation::tanh) return z.array().tanh();
  return z.cwiseMax(0.0);
}

}  // namespace

DualHeadModel::DualHeadModel(const ModelSpec& spec, Rng& init_rng) : spec_(spec) {
  if (spec.input_dim < 1 || spec.hidden < 1 || spec.classes < 1 || spec.domains < 1) {
    throw DomainError("DualHeadModel: all dimensions must be positive");
  }
  tensors_.push_back(lecun(spec.input_dim, spec.hidden, spec.init_scale, init_rng));
  if (spec.kind == ExtractorKind::mlp) tensors_.push_back(Matrix::Zero(1, spec.hidden));
  extractor_end_ = tensors_.size();
  tensors_.push_back(lecun(spec.hidden, spec.classes, spec.init_scale, init_rng));
  tensors_.push_back(Matrix::Zero(1, spec.classes));
  tensors_.push_back(lecun(spec.hidden, spec.domains, spec.init_scale, init_rng));
  tensors_.push_back(Matrix::Zero(1, spec.domains));
}

DualHeadModel::Range DualHeadModel::range(ParamGroup group) const {
  const std::size_t e = extractor_end_;
  switch (group) {
    case ParamGroup::extractor: return {0, e};
    case ParamGroup::class_head: return {e, e + 2};
    case ParamGroup::domain_head: return {e + 2, e + 4};
    case ParamGroup::classifier: return {0, e + 2};
    case ParamGroup::all: return {0, e + 4};
  }
  return {0, 0};
}

std::size_t DualHeadModel::count(ParamGroup group) const {
  const auto r = range(group);
  std::size_t n = 0;
  for (std::size_t i = r.first; i < r.last; ++i) n += static_cast<std::size_t>(tensors_[i].size());
  return n;
}

Vector DualHeadModel::flat(ParamGroup group) const {
  const auto r = range(group);
  Vector out(static_cast<Eigen::Index>(count(group)));
  Eigen::Index off = 0;
  for (std::size_t i = r.first; i < r.last; ++i) {
    const auto& t = tensors_[i];
    out.segment(off, t.size()) = Eigen::Map<const Vector>(t.data(), t.size());
    off += t.size();
  }
  return out;
}

void DualHeadModel::set_flat(ParamGroup group, const Vector& values) {
  if (static_cast<std::size_t>(values.size()) != count(group)) {
    throw DomainError("set_flat: expected " + std::to_string(count(group)) + " values, got " +
                      std::to_string(values.size()));
  }
  const auto r = range(group);
  Eigen::Index off = 0;
  for (std::size_t i = r.first; i < r.last; ++i) {
    auto& t = tensors_[i];
    Eigen::Map<Vector>(t.data(), t.size()) = values.segment(off, t.size());
    off += t.size();
  }
}

void DualHeadModel::check_input(const Matrix& x) const {
  if (x.cols() != spec_.input_dim) {
    throw DomainError("model expects " + std::to_string(spec_.input_dim) +
                      " input features, batch has " + std::to_string(x.cols()));
  }
}

Matrix DualHeadModel::features(const Matrix& x) const {
  check_input(x);
  Matrix z = x * tensors_[0];
  if (spec_.kind == ExtractorKind::mlp) {
    z.rowwise() += tensors_[1].row(0);
    z = activate(z, spec_.activation);
  }
  return z;
}

Matrix DualHeadModel::forward_class(const Matrix& x) const {
  const std::size_t e = extractor_end_;
  Matrix z = features(x) * tensors_[e];
  z.rowwise() += tensors_[e + 1].row(0);
  return z;
}

Matrix DualHeadModel::forward_domain(const Matrix& x) const {
  const std::size_t e = extractor_end_;
  Matrix z = features(x) * tensors_[e + 2];
  z.rowwise() += tensors_[e + 3].row(0);
  return z;
}

DualHeadModel::Bound DualHeadModel::bind(ad::Tape& tape, ParamGroup trainable,
                                         const Vector* extractor_mask) const {
  if (extractor_mask && static_cast<std::size_t>(extractor_mask->size()) != count(ParamGroup::extractor)) {
    throw DomainError("bind: mask length does not match extractor parameters");
  }
  const auto r = range(trainable);
  Bound out;
  out.reserve(tensors_.size());
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    Matrix v = tensors_[i];
    if (extractor_mask && i < extractor_end_) {
      Eigen::Map<const Matrix> m(extractor_mask->data() + off, v.rows(), v.cols());
      v = v.cwiseProduct(m);
      off += v.size();
    }
    const bool train = i >= r.first && i < r.last;
    out.push_back(train ? tape.variable(std::move(v)) : tape.constant(std::move(v)));
  }
  return out;
}

ad::Var DualHeadModel::features(const Bound& p, ad::Var x) const {
  if (x.cols() != spec_.input_dim) check_input(x.value());
  ad::Var z = ad::matmul(x, p[0]);
  if (spec_.kind == ExtractorKind::mlp) {
    z = ad::add_row(z, p[1]);
    z = spec_.activation == Activation::tanh ? ad::tanh(z) : ad::relu(z);
  }
  return z;
}

ad::Var DualHeadModel::class_logits(const Bound& p, ad::Var f) const {
  const std::size_t e = extractor_end_;
  return ad::add_row(ad::matmul(f, p[e]), p[e + 1]);
}

ad::Var DualHeadModel::domain_logits(const Bound& p, ad::Var f) const {
  const std::size_t e = extractor_end_;
  return ad::add_row(ad::matmul(f, p[e + 2]), p[e + 3]);
}

Vector DualHeadModel::gather_grad(const Bound& p, ParamGroup group) const {
  const auto r = range(group);
  Vector out(static_cast<Eigen::Index>(count(group)));
  Eigen::Index off = 0;
  for (std::size_t i = r.first; i < r.last; ++i) {
    const Matrix& g = p[i].grad();
    out.segment(off, g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
    off += g.size();
  }
  return out;
}

Matrix forward_class(const DualHeadModel& model, const Matrix& x) { return model.forward_class(x); }
Matrix forward_domain(const DualHeadModel& model, const Matrix& x) { return model.forward_domain(x); }
Vector flat_params(const DualHeadModel& model) { return model.flat(ParamGroup::extractor); }
void set_flat_params(DualHeadModel& model, const Vector& values) {
  model.set_flat(ParamGroup::extractor, values);
}

double weighted_class_loss(const DualHeadModel& model, const Batch& batch, const Vector& weights,
                           Vector* grad, ParamGroup group, const Vector* extractor_mask) {
  if (static_cast<std::size_t>(weights.size()) != batch.size()) {
    throw DomainError("weighted_class_loss: one weight per example required");
  }
  if (batch.size() == 0) throw DomainError("weighted_class_loss: empty batch");
  ad::Tape tape;
  const auto p = model.bind(tape, group, extractor_mask);
  ad::Var x = tape.constant(batch.x);
  ad::Var ce = ad::cross_entropy(model.class_logits(p, model.features(p, x)), batch.y);
  ad::Var loss = ad::weighted_sum(ce, weights);
  if (grad) {
    tape.backward(loss);
    *grad = model.gather_grad(p, group);
  }
  return loss.scalar();
}

double mean_class_loss(const DualHeadModel& model, const Batch& batch, Vector* grad,
                       ParamGroup group) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n == 0) throw DomainError("mean_class_loss: empty batch");
  return weighted_class_loss(model, batch, Vector::Constant(n, 1.0 / static_cast<double>(n)), grad,
                             group);
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

void save_checkpoint(const std::filesystem::path& dir, const DualHeadModel& model,
                     const std::optional<std::vector<unsigned char>>& mask) {
  std::filesystem::create_directories(dir);
  const Vector all = model.flat(ParamGroup::all);
  io::write_file_atomic(dir / "params.f64",
                        std::string(reinterpret_cast<const char*>(all.data()),
                                    static_cast<std::size_t>(all.size()) * sizeof(double)));
  if (mask) {
    io::write_file_atomic(dir / "mask.u8",
                          std::string(reinterpret_cast<const char*>(mask->data()), mask->size()));
  }
  const auto& s = model.spec();
  io::Manifest m;
  m["version"] = std::to_string(kCheckpointVersion);
  m["kind"] = to_string(s.kind);
  m["input_dim"] = std::to_string(s.input_dim);
  m["hidden"] = std::to_string(s.hidden);
  m["classes"] = std::to_string(s.classes);
  m["domains"] = std::to_string(s.domains);
  m["activation"] = s.activation == Activation::tanh ? "tanh" : "relu";
  m["params"] = std::to_string(all.size());
  m["extractor_params"] = std::to_string(model.count(ParamGroup::extractor));
  m["has_mask"] = mask ? "1" : "0";
  io::write_manifest(dir / "model.txt", m);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto m = io::read_manifest(dir / "model.txt");
  auto get = [&](const char* k) -> const std::string& {
    auto it = m.find(k);
    if (it == m.end()) throw IoError(std::string("checkpoint manifest missing '") + k + "'");
    return it->second;
  };
  if (std::stoi(get("version")) != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version in " + dir.string());
  }
  ModelSpec spec;
  spec.kind = extractor_kind_from_string(get("kind"));
  spec.input_dim = std::stoi(get("input_dim"));
  spec.hidden = std::stoi(get("hidden"));
  spec.classes = std::stoi(get("classes"));
  spec.domains = std::stoi(get("domains"));
  spec.activation = get("activation") == "relu" ? Activation::relu : Activation::tanh;
  Rng unused(0);
  DualHeadModel model(spec, unused);
  const auto n = static_cast<std::size_t>(std::stoull(get("params")));
  if (n != model.count(ParamGroup::all)) throw IoError("checkpoint parameter count mismatch");

  std::ifstream in(dir / "params.f64", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "params.f64").string());
  Vector all(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(all.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(double)) {
    throw IoError("truncated checkpoint parameters");
  }
  model.set_flat(ParamGroup::all, all);

  Checkpoint ck{std::move(model), std::nullopt};
  if (get("has_mask") == "1") {
    const std::size_t k = ck.model.count(ParamGroup::extractor);
    std::ifstream min(dir / "mask.u8", std::ios::binary);
    if (!min) throw IoError("checkpoint declares a mask but mask.u8 is missing");
    std::vector<unsigned char> mask(k);
    min.read(reinterpret_cast<char*>(mask.data()), static_cast<std::streamsize>(k));
    if (static_cast<std::size_t>(min.gcount()) != k) throw IoError("truncated mask");
    ck.mask = std::move(mask);
  }
  return ck;
}

}  // namespace shiftlab::models
