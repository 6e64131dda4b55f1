#include "pera/model.hpp"

#include <cmath>

#include "pera/error.hpp"
#include "pera/views.hpp"

namespace pera {

int BackboneConfig::mlp_dim() const {
  return static_cast<int>(std::lround(embed_dim * mlp_ratio));
}

void BackboneConfig::validate() const {
  require(patch_size >= 1 && image_size >= patch_size && image_size % patch_size == 0,
          ErrorKind::kConfig,
          "backbone: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
              std::to_string(patch_size));
  require(depth >= 1, ErrorKind::kConfig, "backbone: depth must be >= 1");
  require(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0, ErrorKind::kConfig,
          "backbone: embed_dim must be a positive multiple of heads");
  require(mlp_ratio > 0.0 && mlp_dim() >= 1, ErrorKind::kConfig, "backbone: mlp_ratio must be > 0");
  require(drop_path_rate >= 0.0 && drop_path_rate < 1.0, ErrorKind::kConfig,
          "backbone: drop_path_rate must lie in [0,1)");
  require(inject_layer >= -1 && inject_layer <= depth, ErrorKind::kConfig,
          "backbone: inject_layer must lie in [0, depth] (or -1 for depth/2)");
}

void HeadConfig::validate() const {
  require(prototypes >= 2, ErrorKind::kConfig, "head: prototypes must be >= 2");
  require(hidden_dim >= 1 && bottleneck_dim >= 1, ErrorKind::kConfig,
          "head: hidden_dim and bottleneck_dim must be >= 1");
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
std::vector<ParamRef<T>> param_refs(NetworkParams<T>& p) {
  std::vector<ParamRef<T>> refs;
  const auto linear = [&refs](const std::string& name, Linear<T>& l) {
    refs.push_back({name + ".w", &l.w, true});
    refs.push_back({name + ".b", &l.b, false});
  };
  const auto norm = [&refs](const std::string& name, LayerNormParams<T>& n) {
    refs.push_back({name + ".gamma", &n.gamma, false});
    refs.push_back({name + ".beta", &n.beta, false});
  };
  linear("patch_embed", p.patch_embed);
  refs.push_back({"cls_token", &p.cls_token, false});
  refs.push_back({"pos_embed", &p.pos_embed, false});
  refs.push_back({"mask_token", &p.mask_token, false});
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string prefix = "blocks." + std::to_string(i);
    auto& b = p.blocks[i];
    norm(prefix + ".ln1", b.ln1);
    linear(prefix + ".qkv", b.qkv);
    linear(prefix + ".proj", b.proj);
    norm(prefix + ".ln2", b.ln2);
    linear(prefix + ".fc1", b.fc1);
    linear(prefix + ".fc2", b.fc2);
  }
  norm("norm", p.norm);
  linear("proj1", p.proj1);
  linear("proj2", p.proj2);
  linear("proj3", p.proj3);
  refs.push_back({"prototypes", &p.prototypes, true});
  linear("predictor", p.predictor);
  return refs;
}

namespace {

template <class T>
void fill_trunc_normal(Mat<T>& m, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.truncated_normal(stddev));
}

template <class T>
Linear<T> make_linear(int in, int out, Rng& rng) {
  Linear<T> l;
  l.w.resize(in, out);
  fill_trunc_normal(l.w, 0.02, rng);
  l.b = Mat<T>::Zero(1, out);
  return l;
}

template <class T>
LayerNormParams<T> make_norm(int dim) {
  return {Mat<T>::Ones(1, dim), Mat<T>::Zero(1, dim)};
}

// 2-D sine-cosine table; half the channels encode the row, half the column.
template <class T>
Mat<T> sincos_pos_embed(int grid, int dim) {
  Mat<T> pos = Mat<T>::Zero(grid * grid + 1, dim);
  const int quarter = dim / 4;
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int row = 1 + gy * grid + gx;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        pos(row, k) = static_cast<T>(std::sin(gx * omega));
        pos(row, quarter + k) = static_cast<T>(std::cos(gx * omega));
        pos(row, 2 * quarter + k) = static_cast<T>(std::sin(gy * omega));
        pos(row, 3 * quarter + k) = static_cast<T>(std::cos(gy * omega));
      }
    }
  }
  return pos;
}

}  // namespace

template <class T>
NetworkParams<T> init_network(const BackboneConfig& cfg, const HeadConfig& head, Rng& rng) {
  cfg.validate();
  head.validate();
  const int d = cfg.embed_dim;
  NetworkParams<T> p;
  p.patch_embed.w.resize(cfg.pixel_dim(), d);
  const double bound = std::sqrt(6.0 / (cfg.pixel_dim() + d));
  for (Eigen::Index i = 0; i < p.patch_embed.w.size(); ++i) {
    p.patch_embed.w.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
  p.patch_embed.b = Mat<T>::Zero(1, d);
  p.cls_token.resize(1, d);
  fill_trunc_normal(p.cls_token, 0.02, rng);
  if (d % 4 == 0) {
    p.pos_embed = sincos_pos_embed<T>(cfg.grid(), d);
  } else {
    p.pos_embed.resize(cfg.num_patches() + 1, d);
    fill_trunc_normal(p.pos_embed, 0.02, rng);
  }
  p.mask_token.resize(1, d);
  fill_trunc_normal(p.mask_token, 0.02, rng);
  for (int i = 0; i < cfg.depth; ++i) {
    BlockParams<T> b;
    b.ln1 = make_norm<T>(d);
    b.qkv = make_linear<T>(d, 3 * d, rng);
    b.proj = make_linear<T>(d, d, rng);
    b.ln2 = make_norm<T>(d);
    b.fc1 = make_linear<T>(d, cfg.mlp_dim(), rng);
    b.fc2 = make_linear<T>(cfg.mlp_dim(), d, rng);
    p.blocks.push_back(std::move(b));
  }
  p.norm = make_norm<T>(d);
  p.proj1 = make_linear<T>(d, head.hidden_dim, rng);
  p.proj2 = make_linear<T>(head.hidden_dim, head.hidden_dim, rng);
  p.proj3 = make_linear<T>(head.hidden_dim, head.bottleneck_dim, rng);
  p.prototypes.resize(head.bottleneck_dim, head.prototypes);
  fill_trunc_normal(p.prototypes, 0.02, rng);
  p.predictor = make_linear<T>(d, cfg.pixel_dim(), rng);
  return p;
}

template <class T>
NetworkParams<T> zeros_like(const NetworkParams<T>& params) {
  NetworkParams<T> out = params;
  for (auto& ref : param_refs(out)) ref.tensor->setZero();
  return out;
}

template <class To, class From>
NetworkParams<To> cast_network(const NetworkParams<From>& params) {
  NetworkParams<To> out;
  out.blocks.resize(params.blocks.size());
  auto src = param_refs(params);
  auto dst = param_refs(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<To>();
  return out;
}

std::size_t parameter_count(const NetworkParams<float>& params) {
  std::size_t n = 0;
  for (const auto& ref : param_refs(params)) n += static_cast<std::size_t>(ref.tensor->size());
  return n;
}

DropPath DropPath::sample(const BackboneConfig& cfg, int batch, Rng& rng) {
  DropPath drop;
  drop.attn.assign(cfg.depth, std::vector<double>(batch, 1.0));
  drop.mlp.assign(cfg.depth, std::vector<double>(batch, 1.0));
  for (int l = 0; l < cfg.depth; ++l) {
    const double rate = cfg.depth > 1 ? cfg.drop_path_rate * l / (cfg.depth - 1) : 0.0;
    for (int b = 0; b < batch; ++b) {
      const bool keep_attn = !rng.bernoulli(rate);
      const bool keep_mlp = !rng.bernoulli(rate);
      if (rate > 0.0) {
        drop.attn[l][b] = keep_attn ? 1.0 / (1.0 - rate) : 0.0;
        drop.mlp[l][b] = keep_mlp ? 1.0 / (1.0 - rate) : 0.0;
      }
    }
  }
  return drop;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
Mat<T> linear_forward(const Mat<T>& x, const Linear<T>& l) {
  Mat<T> y(x.rows(), l.w.cols());
  y.noalias() = x * l.w;
  y.rowwise() += l.b.row(0);
  return y;
}

template <class T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& dy, const Linear<T>& l, Linear<T>& g) {
  g.w.noalias() += x.transpose() * dy;
  g.b += dy.colwise().sum();
  Mat<T> dx(dy.rows(), l.w.rows());
  dx.noalias() = dy * l.w.transpose();
  return dx;
}

constexpr double kNormEps = 1e-6;

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const LayerNormParams<T>& p, LayerNormCache<T>* cache) {
  const ColVec<T> mean = x.rowwise().mean();
  Mat<T> xhat = x.colwise() - mean;
  const ColVec<T> var = xhat.array().square().rowwise().mean();
  const ColVec<T> rstd = (var.array() + static_cast<T>(kNormEps)).rsqrt();
  xhat.array().colwise() *= rstd.array();
  Mat<T> y = (xhat.array().rowwise() * p.gamma.row(0).array()).rowwise() + p.beta.row(0).array();
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->rstd = rstd;
  }
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const LayerNormCache<T>& c, const Mat<T>& dy, const LayerNormParams<T>& p,
                           LayerNormParams<T>& g) {
  g.gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.beta += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * p.gamma.row(0).array();
  const ColVec<T> mean_d = dxhat.rowwise().mean();
  const ColVec<T> mean_dx = (dxhat.array() * c.xhat.array()).rowwise().mean();
  Mat<T> dx = dxhat.colwise() - mean_d;
  dx -= (c.xhat.array().colwise() * mean_dx.array()).matrix();
  dx.array().colwise() *= c.rstd.array();
  return dx;
}

template <class T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.3989422804014327);
  return cdf + x * pdf;
}

template <class T>
Mat<T> gelu_forward(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return gelu(v); });
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& x_pre, const Mat<T>& dy) {
  return dy.array() * x_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
}

template <class T>
ColVec<T> row_scales(const double* keep, int batch, int tokens) {
  ColVec<T> s(static_cast<Eigen::Index>(batch) * tokens);
  for (int b = 0; b < batch; ++b) s.segment(b * tokens, tokens).setConstant(static_cast<T>(keep[b]));
  return s;
}

template <class T>
void softmax_rows_inplace(Eigen::Ref<Mat<T>> s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
}

template <class T>
void check_finite(const Mat<T>& m, int layer, const char* what) {
  if (!m.allFinite()) {
    fail(ErrorKind::kNumerical,
         std::string("non-finite activation in ") + what + " at layer " + std::to_string(layer));
  }
}

template <class T>
void block_forward(const BlockParams<T>& p, const BackboneConfig& cfg, int layer, Mat<T>& x,
                   int batch, int tokens, const double* keep_attn, const double* keep_mlp,
                   BlockCache<T>* cache) {
  const int d = cfg.embed_dim;
  const int heads = cfg.heads;
  const int dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  LayerNormCache<T> ln1_cache;
  Mat<T> ln1_out = layer_norm(x, p.ln1, &ln1_cache);
  Mat<T> qkv = linear_forward(ln1_out, p.qkv);
  Mat<T> probs(static_cast<Eigen::Index>(batch) * heads * tokens, tokens);
  Mat<T> ctx(static_cast<Eigen::Index>(batch) * tokens, d);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(b * tokens, h * dh, tokens, dh);
      const auto k = qkv.block(b * tokens, d + h * dh, tokens, dh);
      const auto v = qkv.block(b * tokens, 2 * d + h * dh, tokens, dh);
      auto pr = probs.block((static_cast<Eigen::Index>(b) * heads + h) * tokens, 0, tokens, tokens);
      pr.noalias() = (q * k.transpose()) * scale;
      softmax_rows_inplace<T>(pr);
      ctx.block(b * tokens, h * dh, tokens, dh).noalias() = pr * v;
    }
  }
  Mat<T> attn_out = linear_forward(ctx, p.proj);
  if (keep_attn != nullptr) attn_out.array().colwise() *= row_scales<T>(keep_attn, batch, tokens).array();
  Mat<T> x1 = x + attn_out;

  LayerNormCache<T> ln2_cache;
  Mat<T> ln2_out = layer_norm(x1, p.ln2, &ln2_cache);
  Mat<T> h_pre = linear_forward(ln2_out, p.fc1);
  Mat<T> h = gelu_forward(h_pre);
  Mat<T> mlp_out = linear_forward(h, p.fc2);
  if (keep_mlp != nullptr) mlp_out.array().colwise() *= row_scales<T>(keep_mlp, batch, tokens).array();
  Mat<T> x2 = x1 + mlp_out;
  check_finite(x2, layer, "transformer block");

  if (cache != nullptr) {
    cache->x = std::move(x);
    cache->ln1 = std::move(ln1_cache);
    cache->ln1_out = std::move(ln1_out);
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->ctx = std::move(ctx);
    cache->x1 = std::move(x1);
    cache->ln2 = std::move(ln2_cache);
    cache->ln2_out = std::move(ln2_out);
    cache->h_pre = std::move(h_pre);
    cache->h = std::move(h);
    cache->keep_attn.assign(batch, 1.0);
    cache->keep_mlp.assign(batch, 1.0);
    if (keep_attn != nullptr) cache->keep_attn.assign(keep_attn, keep_attn + batch);
    if (keep_mlp != nullptr) cache->keep_mlp.assign(keep_mlp, keep_mlp + batch);
    cache->batch = batch;
    cache->tokens = tokens;
  }
  x = std::move(x2);
}

// dx: gradient w.r.t. the block output on entry, w.r.t. the block input on exit.
template <class T>
void block_backward(const BlockParams<T>& p, const BackboneConfig& cfg, const BlockCache<T>& c,
                    Mat<T>& dx, BlockParams<T>& g) {
  const int d = cfg.embed_dim;
  const int heads = cfg.heads;
  const int dh = d / heads;
  const int batch = c.batch;
  const int tokens = c.tokens;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Mat<T> dmlp = dx;
  dmlp.array().colwise() *= row_scales<T>(c.keep_mlp.data(), batch, tokens).array();
  Mat<T> dh_post = linear_backward(c.h, dmlp, p.fc2, g.fc2);
  Mat<T> dh_pre = gelu_backward(c.h_pre, dh_post);
  Mat<T> dln2 = linear_backward(c.ln2_out, dh_pre, p.fc1, g.fc1);
  Mat<T> dx1 = dx + layer_norm_backward(c.ln2, dln2, p.ln2, g.ln2);

  Mat<T> dattn = dx1;
  dattn.array().colwise() *= row_scales<T>(c.keep_attn.data(), batch, tokens).array();
  Mat<T> dctx = linear_backward(c.ctx, dattn, p.proj, g.proj);
  Mat<T> dqkv = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * tokens, 3 * d);
  Mat<T> dp(tokens, tokens);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto q = c.qkv.block(b * tokens, h * dh, tokens, dh);
      const auto k = c.qkv.block(b * tokens, d + h * dh, tokens, dh);
      const auto v = c.qkv.block(b * tokens, 2 * d + h * dh, tokens, dh);
      const auto pr = c.probs.block((static_cast<Eigen::Index>(b) * heads + h) * tokens, 0, tokens, tokens);
      const auto dout = dctx.block(b * tokens, h * dh, tokens, dh);
      dp.noalias() = dout * v.transpose();
      dqkv.block(b * tokens, 2 * d + h * dh, tokens, dh).noalias() = pr.transpose() * dout;
      const ColVec<T> inner = (dp.array() * pr.array()).rowwise().sum();
      dp = (pr.array() * (dp.colwise() - inner).array()) * scale;
      dqkv.block(b * tokens, h * dh, tokens, dh).noalias() = dp * k;
      dqkv.block(b * tokens, d + h * dh, tokens, dh).noalias() = dp.transpose() * q;
    }
  }
  Mat<T> dln1 = linear_backward(c.ln1_out, dqkv, p.qkv, g.qkv);
  dx = dx1 + layer_norm_backward(c.ln1, dln1, p.ln1, g.ln1);
}

template <class T>
Mat<T> gather_rows(const Mat<T>& x, int batch, int stride, int offset, int count) {
  Mat<T> out(static_cast<Eigen::Index>(batch) * count, x.cols());
  for (int b = 0; b < batch; ++b) out.middleRows(b * count, count) = x.middleRows(b * stride + offset, count);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoders

template <class T>
Mat<T> normalize_pixels(const Mat<T>& pixels) {
  Mat<T> out(pixels.rows(), pixels.cols());
  for (Eigen::Index j = 0; j < pixels.cols(); ++j) {
    const int c = static_cast<int>(j % 3);
    out.col(j) = (pixels.col(j).array() - T(kPixelMean[c])) * T(1.0 / kPixelStd[c]);
  }
  return out;
}

template <class T>
Mat<T> patch_embed(const NetworkParams<T>& params, const Mat<T>& pixels) {
  require(pixels.cols() == params.patch_embed.w.rows(), ErrorKind::kConfig,
          "patch_embed: pixel dimension does not match the backbone patch size");
  return linear_forward(normalize_pixels(pixels), params.patch_embed);
}

template <class T>
Mat<T> patch_embed(const NetworkParams<T>& params, const Image& image, const BackboneConfig& cfg) {
  require(image.height == cfg.image_size && image.width == cfg.image_size, ErrorKind::kConfig,
          "patch_embed: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
              ", backbone expects " + std::to_string(cfg.image_size));
  return patch_embed(params, patchify<T>(image, cfg.patch_size));
}

template <class T>
EncoderOutput<T> encode_student(const NetworkParams<T>& params, const BackboneConfig& cfg,
                                const Mat<T>& visible, const Mat<T>& mask_tokens, int batch,
                                const DropPath* drop, EncoderCache<T>* cache) {
  require(batch >= 1 && visible.rows() % batch == 0 && mask_tokens.rows() % batch == 0,
          ErrorKind::kInternal, "encode_student: rows not divisible by batch");
  const int inject = cfg.injection();
  require(inject <= cfg.depth, ErrorKind::kConfig, "encode_student: inject_layer exceeds depth");
  const int t1 = static_cast<int>(visible.rows() / batch);
  const int nl = static_cast<int>(mask_tokens.rows() / batch);
  const int t2 = t1 + nl;
  if (cache != nullptr) {
    cache->blocks.assign(cfg.depth, {});
    cache->batch = batch;
    cache->visible_tokens = t1;
    cache->mask_tokens = nl;
    cache->inject = inject;
  }
  const auto keep = [&](const std::vector<std::vector<double>>* v, int l) -> const double* {
    return v == nullptr ? nullptr : (*v)[l].data();
  };
  Mat<T> x = visible;
  for (int l = 0; l < inject; ++l) {
    block_forward(params.blocks[l], cfg, l, x, batch, t1, keep(drop ? &drop->attn : nullptr, l),
                  keep(drop ? &drop->mlp : nullptr, l), cache ? &cache->blocks[l] : nullptr);
  }
  Mat<T> full(static_cast<Eigen::Index>(batch) * t2, cfg.embed_dim);
  for (int b = 0; b < batch; ++b) {
    full.middleRows(b * t2, t1) = x.middleRows(b * t1, t1);
    full.middleRows(b * t2 + t1, nl) = mask_tokens.middleRows(b * nl, nl);
  }
  for (int l = inject; l < cfg.depth; ++l) {
    block_forward(params.blocks[l], cfg, l, full, batch, t2, keep(drop ? &drop->attn : nullptr, l),
                  keep(drop ? &drop->mlp : nullptr, l), cache ? &cache->blocks[l] : nullptr);
  }
  EncoderOutput<T> out;
  const Mat<T> cls_pre = gather_rows(full, batch, t2, 0, 1);
  out.cls = layer_norm(cls_pre, params.norm, cache ? &cache->final_norm : nullptr);
  out.mask_out = gather_rows(full, batch, t2, t1, nl);
  return out;
}

template <class T>
void encode_student_backward(const NetworkParams<T>& params, const BackboneConfig& cfg,
                             const EncoderCache<T>& cache, const Mat<T>& d_cls,
                             const Mat<T>& d_mask_out, NetworkParams<T>& grads, Mat<T>& d_visible,
                             Mat<T>& d_mask_tokens) {
  const int batch = cache.batch;
  const int t1 = cache.visible_tokens;
  const int nl = cache.mask_tokens;
  const int t2 = t1 + nl;
  const Mat<T> d_cls_pre = layer_norm_backward(cache.final_norm, d_cls, params.norm, grads.norm);
  Mat<T> dfull = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * t2, cfg.embed_dim);
  for (int b = 0; b < batch; ++b) {
    dfull.row(b * t2) = d_cls_pre.row(b);
    if (nl > 0 && d_mask_out.size() > 0) dfull.middleRows(b * t2 + t1, nl) = d_mask_out.middleRows(b * nl, nl);
  }
  for (int l = cfg.depth - 1; l >= cache.inject; --l) {
    block_backward(params.blocks[l], cfg, cache.blocks[l], dfull, grads.blocks[l]);
  }
  Mat<T> dx(static_cast<Eigen::Index>(batch) * t1, cfg.embed_dim);
  d_mask_tokens.resize(static_cast<Eigen::Index>(batch) * nl, cfg.embed_dim);
  for (int b = 0; b < batch; ++b) {
    dx.middleRows(b * t1, t1) = dfull.middleRows(b * t2, t1);
    d_mask_tokens.middleRows(b * nl, nl) = dfull.middleRows(b * t2 + t1, nl);
  }
  for (int l = cache.inject - 1; l >= 0; --l) {
    block_backward(params.blocks[l], cfg, cache.blocks[l], dx, grads.blocks[l]);
  }
  d_visible = std::move(dx);
}

template <class T>
Mat<T> encode_teacher(const NetworkParams<T>& params, const BackboneConfig& cfg,
                      const Mat<T>& tokens, int batch, EncoderCache<T>* cache) {
  require(batch >= 1 && tokens.rows() % batch == 0, ErrorKind::kInternal,
          "encode_teacher: rows not divisible by batch");
  const int t = static_cast<int>(tokens.rows() / batch);
  if (cache != nullptr) {
    cache->blocks.assign(cfg.depth, {});
    cache->batch = batch;
    cache->visible_tokens = t;
    cache->mask_tokens = 0;
    cache->inject = cfg.depth;
  }
  Mat<T> x = tokens;
  for (int l = 0; l < cfg.depth; ++l) {
    block_forward(params.blocks[l], cfg, l, x, batch, t, nullptr, nullptr,
                  cache ? &cache->blocks[l] : nullptr);
  }
  return layer_norm(gather_rows(x, batch, t, 0, 1), params.norm, cache ? &cache->final_norm : nullptr);
}

// ---------------------------------------------------------------------------
// Heads

namespace {
constexpr double kL2Eps = 1e-12;
}

template <class T>
Mat<T> project(const NetworkParams<T>& params, const Mat<T>& cls, ProjectorCache<T>* cache) {
  ProjectorCache<T> local;
  ProjectorCache<T>& c = cache != nullptr ? *cache : local;
  c.x = cls;
  c.h1_pre = linear_forward(cls, params.proj1);
  c.h1 = gelu_forward(c.h1_pre);
  c.h2_pre = linear_forward(c.h1, params.proj2);
  c.h2 = gelu_forward(c.h2_pre);
  c.z = linear_forward(c.h2, params.proj3);
  c.z_norm = c.z.rowwise().norm();
  c.u = c.z;
  for (Eigen::Index r = 0; r < c.u.rows(); ++r) c.u.row(r) /= std::max(c.z_norm(r), static_cast<T>(kL2Eps));
  c.col_norm = params.prototypes.colwise().norm();
  c.w_normed = params.prototypes;
  for (Eigen::Index k = 0; k < c.w_normed.cols(); ++k) {
    c.w_normed.col(k) /= std::max(c.col_norm(k), static_cast<T>(kL2Eps));
  }
  Mat<T> logits(cls.rows(), params.prototypes.cols());
  logits.noalias() = c.u * c.w_normed;
  if (!logits.allFinite()) fail(ErrorKind::kNumerical, "non-finite projector logits");
  return logits;
}

template <class T>
Mat<T> project_backward(const NetworkParams<T>& params, const ProjectorCache<T>& c,
                        const Mat<T>& d_logits, NetworkParams<T>& grads) {
  const T eps = static_cast<T>(kL2Eps);
  Mat<T> du(d_logits.rows(), c.w_normed.rows());
  du.noalias() = d_logits * c.w_normed.transpose();
  Mat<T> dwn(c.w_normed.rows(), c.w_normed.cols());
  dwn.noalias() = c.u.transpose() * d_logits;
  for (Eigen::Index k = 0; k < dwn.cols(); ++k) {
    const T n = c.col_norm(k);
    if (n > eps) {
      const T dot = c.w_normed.col(k).dot(dwn.col(k));
      grads.prototypes.col(k) += (dwn.col(k) - c.w_normed.col(k) * dot) / n;
    } else {
      grads.prototypes.col(k) += dwn.col(k) / eps;
    }
  }
  Mat<T> dz(du.rows(), du.cols());
  for (Eigen::Index r = 0; r < du.rows(); ++r) {
    const T n = c.z_norm(r);
    if (n > eps) {
      dz.row(r) = (du.row(r) - c.u.row(r) * c.u.row(r).dot(du.row(r))) / n;
    } else {
      dz.row(r) = du.row(r) / eps;
    }
  }
  Mat<T> dh2 = linear_backward(c.h2, dz, params.proj3, grads.proj3);
  Mat<T> dh2_pre = gelu_backward(c.h2_pre, dh2);
  Mat<T> dh1 = linear_backward(c.h1, dh2_pre, params.proj2, grads.proj2);
  Mat<T> dh1_pre = gelu_backward(c.h1_pre, dh1);
  return linear_backward(c.x, dh1_pre, params.proj1, grads.proj1);
}

template <class T>
Mat<T> projector_bottleneck(const NetworkParams<T>& params, const Mat<T>& cls) {
  ProjectorCache<T> c;
  project(params, cls, &c);
  return c.u;
}

template <class T>
Mat<T> predict_pixels(const NetworkParams<T>& params, const Mat<T>& mask_out) {
  if (mask_out.rows() == 0) return Mat<T>(0, params.predictor.w.cols());
  return linear_forward(mask_out, params.predictor);
}

template <class T>
Mat<T> dense_tokens(const NetworkParams<T>& params, const BackboneConfig& cfg, const Image& image) {
  const Mat<T> emb = patch_embed(params, image, cfg);
  Mat<T> tokens(emb.rows() + 1, emb.cols());
  tokens.row(0) = params.cls_token + params.pos_embed.row(0);
  tokens.bottomRows(emb.rows()) = emb + params.pos_embed.bottomRows(emb.rows());
  return tokens;
}

template <class T>
Mat<T> dense_cls(const NetworkParams<T>& params, const BackboneConfig& cfg, const Image& image) {
  return encode_teacher(params, cfg, dense_tokens(params, cfg, image), 1);
}

template <class T>
Mat<T> attention_maps(const NetworkParams<T>& params, const BackboneConfig& cfg,
                      const Image& image, std::vector<double>* self_mass) {
  EncoderCache<T> cache;
  encode_teacher(params, cfg, dense_tokens(params, cfg, image), 1, &cache);
  const auto& probs = cache.blocks.back().probs;
  const int n = cfg.num_patches();
  const int t = n + 1;
  Mat<T> maps(cfg.heads, n);
  if (self_mass != nullptr) self_mass->assign(cfg.heads, 0.0);
  for (int h = 0; h < cfg.heads; ++h) {
    maps.row(h) = probs.block(static_cast<Eigen::Index>(h) * t, 1, 1, n);
    if (self_mass != nullptr) (*self_mass)[h] = static_cast<double>(probs(static_cast<Eigen::Index>(h) * t, 0));
  }
  return maps;
}

#define PERA_INSTANTIATE_MODEL(T)                                                                  \
  template std::vector<ParamRef<T>> param_refs<T>(NetworkParams<T>&);                             \
  template NetworkParams<T> init_network<T>(const BackboneConfig&, const HeadConfig&, Rng&);      \
  template NetworkParams<T> zeros_like<T>(const NetworkParams<T>&);                               \
  template Mat<T> normalize_pixels<T>(const Mat<T>&);                                            \
  template Mat<T> patch_embed<T>(const NetworkParams<T>&, const Mat<T>&);                         \
  template Mat<T> patch_embed<T>(const NetworkParams<T>&, const Image&, const BackboneConfig&);   \
  template EncoderOutput<T> encode_student<T>(const NetworkParams<T>&, const BackboneConfig&,     \
                                              const Mat<T>&, const Mat<T>&, int, const DropPath*, \
                                              EncoderCache<T>*);                                  \
  template void encode_student_backward<T>(const NetworkParams<T>&, const BackboneConfig&,       \
                                           const EncoderCache<T>&, const Mat<T>&, const Mat<T>&,  \
                                           NetworkParams<T>&, Mat<T>&, Mat<T>&);                  \
  template Mat<T> encode_teacher<T>(const NetworkParams<T>&, const BackboneConfig&, const Mat<T>&, \
                                    int, EncoderCache<T>*);                                       \
  template Mat<T> project<T>(const NetworkParams<T>&, const Mat<T>&, ProjectorCache<T>*);         \
  template Mat<T> project_backward<T>(const NetworkParams<T>&, const ProjectorCache<T>&,          \
                                      const Mat<T>&, NetworkParams<T>&);                          \
  template Mat<T> projector_bottleneck<T>(const NetworkParams<T>&, const Mat<T>&);                \
  template Mat<T> predict_pixels<T>(const NetworkParams<T>&, const Mat<T>&);                      \
  template Mat<T> dense_tokens<T>(const NetworkParams<T>&, const BackboneConfig&, const Image&);  \
  template Mat<T> dense_cls<T>(const NetworkParams<T>&, const BackboneConfig&, const Image&);     \
  template Mat<T> attention_maps<T>(const NetworkParams<T>&, const BackboneConfig&, const Image&, \
                                    std::vector<double>*);

PERA_INSTANTIATE_MODEL(float)
PERA_INSTANTIATE_MODEL(double)

template NetworkParams<double> cast_network<double, float>(const NetworkParams<float>&);
template NetworkParams<float> cast_network<float, double>(const NetworkParams<double>&);

}  // namespace pera
