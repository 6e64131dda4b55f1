#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pera/data.hpp"
#include "pera/pipeline.hpp"

namespace oracle {

using pera::MatD;

Table to_table(const MatD& m) {
  Table t(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t[r][c] = m(r, c);
  return t;
}

Table to_table(const pera::MatF& m) { return to_table(MatD(m.cast<double>())); }

MatD to_mat(const Table& t) {
  MatD m(static_cast<Eigen::Index>(t.size()), t.empty() ? 0 : static_cast<Eigen::Index>(t[0].size()));
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t c = 0; c < t[r].size(); ++c) m(r, c) = t[r][c];
  return m;
}

Vec softmax(const Vec& logits, double temperature) {
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  Vec p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp((logits[k] - mx) / temperature);
    sum += p[k];
  }
  for (double& v : p) v /= sum;
  return p;
}

double entropy(const Vec& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double cls_loss(const Table& student, const Table& teacher, const Vec& center, double tpt_s,
                double tpt_t) {
  double total = 0.0;
  for (std::size_t b = 0; b < student.size(); ++b) {
    Vec shifted(teacher[b].size());
    for (std::size_t k = 0; k < shifted.size(); ++k) shifted[k] = teacher[b][k] - center[k];
    const Vec pt = softmax(shifted, tpt_t);
    const Vec ps = softmax(student[b], tpt_s);
    for (std::size_t k = 0; k < pt.size(); ++k) total -= pt[k] * std::log(ps[k]);
  }
  return total / static_cast<double>(student.size());
}

double mse(const Table& pred, const Table& target, double w) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < pred.size(); ++r) {
    for (std::size_t c = 0; c < pred[r].size(); ++c) {
      const double d = pred[r][c] - target[r][c];
      sum += d * d;
      ++n;
    }
  }
  return n == 0 ? 0.0 : w * sum / static_cast<double>(n);
}

Vec center_update(const Vec& center, const Table& teacher, double momentum) {
  Vec out(center.size());
  for (std::size_t k = 0; k < center.size(); ++k) {
    double mean = 0.0;
    for (const Vec& row : teacher) mean += row[k];
    mean /= static_cast<double>(teacher.size());
    out[k] = momentum * center[k] + (1.0 - momentum) * mean;
  }
  return out;
}

Vec ema(const Vec& teacher, const Vec& student, double momentum) {
  Vec out(teacher.size());
  for (std::size_t i = 0; i < teacher.size(); ++i)
    out[i] = momentum * teacher[i] + (1.0 - momentum) * student[i];
  return out;
}

Vec layer_norm(const Vec& x, const Vec& gamma, const Vec& beta) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + 1e-6);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
  return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

namespace {

Vec row(const MatD& m, Eigen::Index r = 0) {
  Vec v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) v[c] = m(r, c);
  return v;
}

Vec affine(const Vec& x, const pera::Linear<double>& lin) {
  Vec y(static_cast<std::size_t>(lin.w.cols()));
  for (Eigen::Index o = 0; o < lin.w.cols(); ++o) {
    double s = lin.b(0, o);
    for (Eigen::Index i = 0; i < lin.w.rows(); ++i) s += x[i] * lin.w(i, o);
    y[o] = s;
  }
  return y;
}

}  // namespace

Table encode(const pera::NetworkParams<double>& params, const pera::BackboneConfig& cfg,
             Table x, int first, int last) {
  const std::size_t n = x.size();
  const int d = cfg.embed_dim;
  const int dh = d / cfg.heads;
  for (int l = first; l < last; ++l) {
    const auto& blk = params.blocks[l];
    Table qkv(n);
    for (std::size_t i = 0; i < n; ++i)
      qkv[i] = affine(layer_norm(x[i], row(blk.ln1.gamma), row(blk.ln1.beta)), blk.qkv);
    Table ctx(n, Vec(d, 0.0));
    for (int h = 0; h < cfg.heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        Vec scores(n);
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
          scores[j] = s / std::sqrt(static_cast<double>(dh));
        }
        const Vec a = softmax(scores, 1.0);
        for (std::size_t j = 0; j < n; ++j)
          for (int c = 0; c < dh; ++c) ctx[i][h * dh + c] += a[j] * qkv[j][2 * d + h * dh + c];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Vec attn = affine(ctx[i], blk.proj);
      for (int c = 0; c < d; ++c) x[i][c] += attn[c];
      Vec hidden = affine(layer_norm(x[i], row(blk.ln2.gamma), row(blk.ln2.beta)), blk.fc1);
      for (double& v : hidden) v = gelu(v);
      const Vec out = affine(hidden, blk.fc2);
      for (int c = 0; c < d; ++c) x[i][c] += out[c];
    }
  }
  return x;
}

Vec joint_cls(const pera::NetworkParams<double>& params, const pera::BackboneConfig& cfg,
              const Table& tokens) {
  const Table out = encode(params, cfg, tokens, 0, cfg.depth);
  return layer_norm(out[0], row(params.norm.gamma), row(params.norm.beta));
}

double max_abs_diff(const MatD& a, const MatD& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

double max_rel_diff(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

pera::RunConfig tiny_config() {
  pera::RunConfig cfg;
  cfg.backbone.image_size = 16;
  cfg.backbone.patch_size = 4;
  cfg.backbone.depth = 2;
  cfg.backbone.embed_dim = 8;
  cfg.backbone.heads = 2;
  cfg.backbone.drop_path_rate = 0.0;
  cfg.head.prototypes = 8;
  cfg.head.hidden_dim = 12;
  cfg.head.bottleneck_dim = 6;
  cfg.trainer.mask_ratios = {0.3, 0.2, 0.5};
  return cfg;
}

void perturb(pera::NetworkParams<double>& params, double scale, pera::Rng& rng) {
  for (auto& ref : pera::param_refs(params))
    for (Eigen::Index i = 0; i < ref.tensor->size(); ++i) ref.tensor->data()[i] += scale * rng.normal();
}

GradCheck gradient_check(std::uint64_t seed, double step, double param_scale) {
  const pera::RunConfig cfg = tiny_config();
  const pera::Dataset ds = pera::generate_synthetic_dataset(3, cfg.backbone.image_size, 4, seed);
  pera::ImageBatch batch;
  batch.images = ds.images;
  batch.labels = ds.labels;
  batch.indices = {0, 1, 2};
  const auto inputs = pera::prepare_inputs<double>(batch, cfg, seed, 0);

  pera::Rng rng{seed, 0x9c4e};
  auto student = pera::init_network<double>(cfg.backbone, cfg.head, rng);
  const auto teacher = pera::init_network<double>(cfg.backbone, cfg.head, rng);
  perturb(student, param_scale, rng);
  MatD center(1, cfg.head.prototypes);
  for (int k = 0; k < cfg.head.prototypes; ++k) center(0, k) = 0.1 * rng.normal();

  pera::StepOptions opt;
  opt.temps = {cfg.trainer.tpt_s, cfg.trainer.tpt_t_start};
  opt.mse_weight = cfg.trainer.mse_weight;
  auto grads = pera::zeros_like(student);
  pera::forward_backward(student, teacher, cfg.backbone, inputs, center, opt, nullptr, &grads);
  const auto loss = [&] {
    return pera::forward_backward<double>(student, teacher, cfg.backbone, inputs, center, opt,
                                          nullptr, nullptr)
        .loss.total;
  };

  GradCheck result;
  auto params = pera::param_refs(student);
  auto analytic = pera::param_refs(grads);
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index i = 0; i < params[k].tensor->size(); ++i) {
      double& x = params[k].tensor->data()[i];
      const double x0 = x;
      x = x0 + step;
      const double fp = loss();
      x = x0 - step;
      const double fm = loss();
      x = x0;
      const double rel = max_rel_diff((fp - fm) / (2.0 * step), analytic[k].tensor->data()[i], 1e-6);
      ++result.checked;
      if (rel > result.worst) {
        result.worst = rel;
        result.worst_name = params[k].name;
      }
    }
  }
  return result;
}

TempDir::TempDir(const std::string& tag) {
  std::random_device rd;
  path = std::filesystem::temp_directory_path() /
         ("pera-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
  std::filesystem::create_directories(path);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path, ec);
}

}  // namespace oracle
