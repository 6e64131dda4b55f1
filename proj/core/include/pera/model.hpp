#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pera/image.hpp"
#include "pera/rng.hpp"
#include "pera/tensor.hpp"

namespace pera {

struct BackboneConfig {
  int image_size = 64;
  int patch_size = 8;
  int depth = 4;
  int embed_dim = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  double drop_path_rate = 0.1;
  /// Layer at which mask tokens join the student sequence; -1 means depth / 2.
  int inject_layer = -1;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int pixel_dim() const { return patch_size * patch_size * 3; }
  int mlp_dim() const;
  int injection() const { return inject_layer < 0 ? depth / 2 : inject_layer; }
  void validate() const;
};

struct HeadConfig {
  int prototypes = 256;  // K
  int hidden_dim = 256;
  int bottleneck_dim = 256;

  void validate() const;
};

template <class T>
struct Linear {
  Mat<T> w;  // in x out
  Mat<T> b;  // 1 x out
};

template <class T>
struct LayerNormParams {
  Mat<T> gamma;
  Mat<T> beta;
};

template <class T>
struct BlockParams {
  LayerNormParams<T> ln1;
  Linear<T> qkv;
  Linear<T> proj;
  LayerNormParams<T> ln2;
  Linear<T> fc1;
  Linear<T> fc2;
};

/// Full parameter set of one network. Student and teacher share this layout;
/// the teacher never reads mask_token or the predictor but carries them so
/// both collections stay structurally identical for the EMA update.
template <class T>
struct NetworkParams {
  Linear<T> patch_embed;  // pixel_dim -> D
  Mat<T> cls_token;       // 1 x D
  Mat<T> pos_embed;       // (N + 1) x D, row 0 belongs to cls
  Mat<T> mask_token;      // 1 x D
  std::vector<BlockParams<T>> blocks;
  LayerNormParams<T> norm;

  // Projector: MLP -> L2-normalised bottleneck -> weight-normalised prototypes.
  Linear<T> proj1;
  Linear<T> proj2;
  Linear<T> proj3;
  Mat<T> prototypes;  // bottleneck x K, columns normalised in the forward pass

  Linear<T> predictor;  // D -> pixel_dim
};

template <class T>
struct ParamRef {
  std::string name;
  Mat<T>* tensor;
  bool decay;  // weight decay applies (matrices only)
};

template <class T>
std::vector<ParamRef<T>> param_refs(NetworkParams<T>& params);

template <class T>
std::vector<ParamRef<T>> param_refs(const NetworkParams<T>& params) {
  return param_refs(const_cast<NetworkParams<T>&>(params));
}

template <class T>
NetworkParams<T> init_network(const BackboneConfig& backbone, const HeadConfig& head, Rng& rng);

template <class T>
NetworkParams<T> zeros_like(const NetworkParams<T>& params);

template <class To, class From>
NetworkParams<To> cast_network(const NetworkParams<From>& params);

std::size_t parameter_count(const NetworkParams<float>& params);

/// Per-layer, per-sample stochastic depth decisions for the student. Each
/// entry is the residual scale: 0 when dropped, 1 / (1 - rate) otherwise.
struct DropPath {
  std::vector<std::vector<double>> attn;  // [layer][sample]
  std::vector<std::vector<double>> mlp;

  /// Rates grow linearly from 0 at the first layer to drop_path_rate.
  static DropPath sample(const BackboneConfig& cfg, int batch, Rng& rng);
};

// ---------------------------------------------------------------------------
// Forward / backward

template <class T>
struct LayerNormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <class T>
struct BlockCache {
  Mat<T> x;
  LayerNormCache<T> ln1;
  Mat<T> ln1_out;
  Mat<T> qkv;
  Mat<T> probs;  // (batch * heads * tokens) x tokens
  Mat<T> ctx;
  Mat<T> x1;
  LayerNormCache<T> ln2;
  Mat<T> ln2_out;
  Mat<T> h_pre;
  Mat<T> h;
  std::vector<double> keep_attn;  // per sample
  std::vector<double> keep_mlp;
  int batch = 0;
  int tokens = 0;
};

template <class T>
struct EncoderCache {
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> final_norm;
  int batch = 0;
  int visible_tokens = 0;  // T1: cls + s
  int mask_tokens = 0;     // L per sample
  int inject = 0;
};

template <class T>
struct EncoderOutput {
  Mat<T> cls;       // B x D, after the final norm
  Mat<T> mask_out;  // (B * L) x D, residual stream after the last block
};

/// Per-channel standardisation of patch rows laid out as (py, px, channel),
/// with the usual ImageNet statistics.
inline constexpr double kPixelMean[3] = {0.485, 0.456, 0.406};
inline constexpr double kPixelStd[3] = {0.229, 0.224, 0.225};

template <class T>
Mat<T> normalize_pixels(const Mat<T>& pixels);

/// Linear projection of standardised patch pixels; positional embeddings are
/// added later during assembly. Input (rows x pixel_dim) in [0, 1], output
/// (rows x D).
template <class T>
Mat<T> patch_embed(const NetworkParams<T>& params, const Mat<T>& pixels);

/// Patch tokens of one image, N x D.
template <class T>
Mat<T> patch_embed(const NetworkParams<T>& params, const Image& image, const BackboneConfig& cfg);

/// Student encoder. `visible` holds B sequences of [cls, s-patches] stacked
/// row-wise, `mask_tokens` holds B groups of L mask slots. Layers before the
/// injection layer see only the visible tokens; the mask slots are appended
/// to every sequence at the injection layer.
template <class T>
EncoderOutput<T> encode_student(const NetworkParams<T>& params, const BackboneConfig& cfg,
                                const Mat<T>& visible, const Mat<T>& mask_tokens, int batch,
                                const DropPath* drop, EncoderCache<T>* cache);

template <class T>
void encode_student_backward(const NetworkParams<T>& params, const BackboneConfig& cfg,
                             const EncoderCache<T>& cache, const Mat<T>& d_cls,
                             const Mat<T>& d_mask_out, NetworkParams<T>& grads, Mat<T>& d_visible,
                             Mat<T>& d_mask_tokens);

/// Plain ViT pass over B stacked sequences of equal length, no stochastic
/// depth. Returns the normalised cls rows. Used for the teacher and for dense
/// feature extraction.
template <class T>
Mat<T> encode_teacher(const NetworkParams<T>& params, const BackboneConfig& cfg,
                      const Mat<T>& tokens, int batch, EncoderCache<T>* cache = nullptr);

template <class T>
struct ProjectorCache {
  Mat<T> x, h1_pre, h1, h2_pre, h2, z;
  Eigen::Matrix<T, Eigen::Dynamic, 1> z_norm;
  Mat<T> u;
  Mat<T> w_normed;
  Eigen::Matrix<T, 1, Eigen::Dynamic> col_norm;
};

/// cls (B x D) -> prototype logits (B x K).
template <class T>
Mat<T> project(const NetworkParams<T>& params, const Mat<T>& cls, ProjectorCache<T>* cache = nullptr);

template <class T>
Mat<T> project_backward(const NetworkParams<T>& params, const ProjectorCache<T>& cache,
                        const Mat<T>& d_logits, NetworkParams<T>& grads);

/// Unit-norm bottleneck activations for the given cls rows.
template <class T>
Mat<T> projector_bottleneck(const NetworkParams<T>& params, const Mat<T>& cls);

/// Mask-slot outputs ((B * L) x D) -> pixel predictions ((B * L) x pixel_dim).
template <class T>
Mat<T> predict_pixels(const NetworkParams<T>& params, const Mat<T>& mask_out);

/// [cls, all patches] with positional embeddings, (N + 1) x D.
template <class T>
Mat<T> dense_tokens(const NetworkParams<T>& params, const BackboneConfig& cfg, const Image& image);

/// Dense-input cls features for one image (1 x D).
template <class T>
Mat<T> dense_cls(const NetworkParams<T>& params, const BackboneConfig& cfg, const Image& image);

/// Last-layer attention of the cls query over patch tokens, one grid x grid
/// map per head (row-major grid, heads x N). Also returns the cls row mass on
/// the cls token itself per head through `self_mass` when non-null.
template <class T>
Mat<T> attention_maps(const NetworkParams<T>& params, const BackboneConfig& cfg,
                      const Image& image, std::vector<double>* self_mass = nullptr);

}  // namespace pera
