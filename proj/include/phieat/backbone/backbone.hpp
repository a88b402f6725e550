#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "phieat/core/aligned.hpp"
#include "phieat/core/image.hpp"

namespace phieat::backbone {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct BackboneConfig {
  int image_size = 64;  // largest input; smaller crops share the weights
  int patch_size = 8;
  int embed_dim = 128;
  int depth = 4;
  int num_heads = 4;
  int num_registers = 4;
  int prototype_count = 1024;
  int head_hidden_dim = 256;  // 0 collapses both heads to single linear layers
  int head_bottleneck_dim = 64;
  int ibot_head_dim = 64;

  void validate() const;  // config errors on violated divisibility/size rules
  int head_dim() const { return embed_dim / num_heads; }
  int patch_dim() const { return 3 * patch_size * patch_size; }
  int grid_for(int size) const { return size / patch_size; }
  int tokens_for(int size) const {
    return 1 + num_registers + grid_for(size) * grid_for(size);
  }
};

// Flat parameter/gradient storage with a named-entry registry. Entry order is
// fixed by construction from the config, which makes the optimizer, EMA, and
// checkpoints simple array operations. Matrices are column-major views.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    size_t offset = 0;
    int rows = 0, cols = 0;
    bool decay = false;  // weight decay applies only to 2D weight matrices
  };

  size_t add(const std::string& name, int rows, int cols, bool decay);
  void finalize();  // allocates data/grad once all entries are added

  Eigen::Map<Mat<S>> view(const std::string& name);
  Eigen::Map<const Mat<S>> view(const std::string& name) const;
  Eigen::Map<Mat<S>> view(size_t index);
  Eigen::Map<const Mat<S>> view(size_t index) const;
  Eigen::Map<Mat<S>> grad_view(const std::string& name);
  Eigen::Map<Mat<S>> grad_view(size_t index);
  size_t index_of(const std::string& name) const;  // invalid-argument when absent

  const std::vector<Entry>& entries() const { return entries_; }
  AlignedVec<S>& data() { return data_; }
  const AlignedVec<S>& data() const { return data_; }
  AlignedVec<S>& grad() { return grad_; }
  const AlignedVec<S>& grad() const { return grad_; }
  void zero_grad();
  bool all_finite() const;

 private:
  std::vector<Entry> entries_;
  AlignedVec<S> data_, grad_;  // fixed alignment keeps float sums reproducible
  size_t total_ = 0;
  bool finalized_ = false;
};

// Registry layout for the config; all values zero until init_params.
template <typename S>
ParamStore<S> make_param_store(const BackboneConfig& cfg);

// Truncated-normal (sigma 0.02, cut at 2 sigma) weights, zero class/register
// tokens, unit layer-norm gains, unit-norm prototype rows. Deterministic in
// (config, seed).
template <typename S>
void init_params(ParamStore<S>& store, const BackboneConfig& cfg, uint64_t seed);

// Re-normalize prototype rows to unit L2 norm (call after each optimizer step).
template <typename S>
void renormalize_prototypes(ParamStore<S>& store);

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& src, const BackboneConfig& cfg);

// Raw patch pixel vectors: column p holds patch p's pixels mapped to [-1, 1],
// channel-major within the patch, patches in row-major grid order.
template <typename S>
Mat<S> patchify(const Image& image, int patch_size);

// 2D rotary embedding applied to one head vector at integer grid position
// (row, col): the first half of the dims rotates by row angles, the second by
// column angles, in (2t, 2t+1) pairs. cls/register tokens use (0, 0), which is
// the identity. Exposed for direct property tests; the encoder uses the same
// math via precomputed tables.
template <typename S>
void rope_apply(Eigen::Ref<Vec<S>> v, int row, int col, bool inverse);

// Transformer encoder with caches for hand-written backprop. One instance per
// (crop batch, forward); all crops in a call share one resolution. Pre-norm
// blocks, exact-erf GELU, block-diagonal attention (tokens never attend across
// crops).
template <typename S>
class Encoder {
 public:
  Encoder(const BackboneConfig& cfg, const ParamStore<S>& params);
  ~Encoder();  // out of line: the block cache type is private to the .cpp

  // masks[i] may be null (no masking); otherwise one flag per patch, and
  // masked positions take the mask token instead of their patch projection.
  void forward(const std::vector<const Image*>& crops,
               const std::vector<const std::vector<uint8_t>*>& masks, bool keep_caches);

  const Mat<S>& tokens() const { return out_; }  // D x (crops * tokens_per_crop)
  int crop_count() const { return n_crops_; }
  int tokens_per_crop() const { return n_tokens_; }
  int grid() const { return grid_; }
  int cls_col(int crop) const { return crop * n_tokens_; }
  int patch_col(int crop, int patch) const {
    return crop * n_tokens_ + 1 + cfg_.num_registers + patch;
  }

  // d_tokens matches tokens(); parameter gradients accumulate into `grads`.
  void backward(const Mat<S>& d_tokens, ParamStore<S>& grads);

 private:
  struct BlockCache;
  const BackboneConfig& cfg_;
  const ParamStore<S>& params_;
  std::vector<std::vector<uint8_t>> masks_;
  std::vector<BlockCache> caches_;
  Mat<S> pixels_;  // patch_dim x (crops * patches)
  Mat<S> x0_;      // embedded tokens before block 0
  Mat<S> pre_final_, xhat_final_, out_;
  Vec<S> inv_final_;
  Vec<S> rope_cos_, rope_sin_;  // per (token, head-dim) tables, crop-shared
  int n_crops_ = 0, n_tokens_ = 0, grid_ = 0;
  bool has_caches_ = false;
};

// Inference features for one image (no caches, float weights).
struct FeatureSet {
  std::vector<float> cls;        // D
  std::vector<float> registers;  // R x D, row-major
  std::vector<float> patches;    // P x D, row-major, patches in grid order
  int grid_rows = 0, grid_cols = 0, dim = 0;
};

FeatureSet encode(const Image& image, const ParamStore<float>& params,
                  const BackboneConfig& cfg);

// Prototype head: logits = prototypes * normalize(bottleneck(mlp(cls))).
// Temperature scaling belongs to the objectives, not here.
template <typename S>
struct ProtoTrace {
  Mat<S> input;       // D x B
  Mat<S> pre1, act1;  // hidden pre-activation and GELU output
  Mat<S> pre2, act2;
  Mat<S> bott;      // bottleneck output before normalization
  Vec<S> inv_norm;  // per column: 1 / ||bott||
  Mat<S> z;         // normalized bottleneck
  Mat<S> logits;    // K x B
};

template <typename S>
void proto_forward(const BackboneConfig& cfg, const ParamStore<S>& params, const Mat<S>& cls,
                   ProtoTrace<S>& trace);

template <typename S>
void proto_backward(const BackboneConfig& cfg, const ParamStore<S>& params,
                    const ProtoTrace<S>& trace, const Mat<S>& d_logits, ParamStore<S>& grads,
                    Mat<S>& d_input);

// Patch projection head for the masked-token objective.
template <typename S>
struct IbotTrace {
  Mat<S> input;  // D x M
  Mat<S> pre1, act1;
  Mat<S> out;  // ibot_head_dim x M
};

template <typename S>
void ibot_forward(const BackboneConfig& cfg, const ParamStore<S>& params, const Mat<S>& patches,
                  IbotTrace<S>& trace);

template <typename S>
void ibot_backward(const BackboneConfig& cfg, const ParamStore<S>& params,
                   const IbotTrace<S>& trace, const Mat<S>& d_out, ParamStore<S>& grads,
                   Mat<S>& d_input);

// Model checkpoint: config, format version, and all named arrays; loading
// rejects any shape mismatch.
void save_backbone(const std::string& path, const BackboneConfig& cfg,
                   const ParamStore<float>& params);
std::pair<BackboneConfig, ParamStore<float>> load_backbone(const std::string& path);

std::string config_to_json(const BackboneConfig& cfg);
BackboneConfig config_from_json(const std::string& text);

}  // namespace phieat::backbone
