#include "phieat/backbone/backbone.hpp"

#include <cmath>
#include <cstring>

#include <json.hpp>

#include "phieat/core/errors.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/core/tensor_file.hpp"

namespace phieat::backbone {

namespace {

constexpr double kRopeBase = 100.0;  // angle spread tuned for single-digit grids
constexpr double kLnEps = 1e-6;
constexpr uint64_t kInitTag = 0x696e6974;

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.70710678118654752440)));
}

template <typename S>
S gelu_grad(S x) {
  S cdf = S(0.5) * (S(1) + std::erf(x * S(0.70710678118654752440)));
  S pdf = std::exp(S(-0.5) * x * x) * S(0.39894228040143267794);
  return cdf + x * pdf;
}

// y = gamma .* (x - mean)/std + beta per column; caches xhat and 1/std
template <typename S>
void ln_forward(const Mat<S>& x, Eigen::Map<const Mat<S>> gamma, Eigen::Map<const Mat<S>> beta,
                Mat<S>& y, Mat<S>& xhat, Vec<S>& inv_std) {
  const int n = int(x.cols());
  y.resize(x.rows(), n);
  xhat.resize(x.rows(), n);
  inv_std.resize(n);
  for (int i = 0; i < n; ++i) {
    S mu = x.col(i).mean();
    S var = (x.col(i).array() - mu).square().mean();
    S is = S(1) / std::sqrt(var + S(kLnEps));
    inv_std(i) = is;
    xhat.col(i) = (x.col(i).array() - mu) * is;
    y.col(i) = xhat.col(i).array() * gamma.col(0).array() + beta.col(0).array();
  }
}

template <typename S>
void ln_backward(const Mat<S>& dy, const Mat<S>& xhat, const Vec<S>& inv_std,
                 Eigen::Map<const Mat<S>> gamma, Eigen::Map<Mat<S>> dgamma,
                 Eigen::Map<Mat<S>> dbeta, Mat<S>& dx) {
  const int n = int(dy.cols());
  dx.resize(dy.rows(), n);
  for (int i = 0; i < n; ++i) {
    auto g = (dy.col(i).array() * gamma.col(0).array()).eval();
    S m1 = g.mean();
    S m2 = (g * xhat.col(i).array()).mean();
    dx.col(i) = (g - m1 - xhat.col(i).array() * m2) * inv_std(i);
    dgamma.col(0).array() += dy.col(i).array() * xhat.col(i).array();
    dbeta.col(0).array() += dy.col(i).array();
  }
}

double rope_freq(int pair, int pairs) { return std::pow(kRopeBase, -double(pair) / pairs); }

}  // namespace

void BackboneConfig::validate() const {
  require(patch_size >= 1 && image_size >= patch_size, ErrorKind::config,
          "image_size must be at least one patch");
  require(image_size % patch_size == 0, ErrorKind::config,
          "image_size must be divisible by patch_size");
  require(embed_dim % num_heads == 0, ErrorKind::config,
          "embed_dim must be divisible by num_heads");
  require(head_dim() % 4 == 0, ErrorKind::config,
          "head dim must be divisible by 4 for two-axis rotary pairs");
  require(prototype_count >= 2, ErrorKind::config, "prototype_count must be >= 2");
  require(depth >= 1 && num_registers >= 0, ErrorKind::config, "depth/register counts invalid");
  require(head_bottleneck_dim >= 1 && ibot_head_dim >= 1 && head_hidden_dim >= 0,
          ErrorKind::config, "head dims invalid");
}

// ---------------------------------------------------------------------------
// ParamStore

template <typename S>
size_t ParamStore<S>::add(const std::string& name, int rows, int cols, bool decay) {
  require(!finalized_, ErrorKind::invalid_argument, "param store already finalized");
  entries_.push_back({name, total_, rows, cols, decay});
  total_ += size_t(rows) * cols;
  return entries_.size() - 1;
}

template <typename S>
void ParamStore<S>::finalize() {
  data_.assign(total_, S(0));
  grad_.assign(total_, S(0));
  finalized_ = true;
}

template <typename S>
size_t ParamStore<S>::index_of(const std::string& name) const {
  for (size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  fail(ErrorKind::invalid_argument, "no parameter named '" + name + "'");
}

template <typename S>
Eigen::Map<Mat<S>> ParamStore<S>::view(size_t index) {
  const Entry& e = entries_[index];
  return {data_.data() + e.offset, e.rows, e.cols};
}
template <typename S>
Eigen::Map<const Mat<S>> ParamStore<S>::view(size_t index) const {
  const Entry& e = entries_[index];
  return {data_.data() + e.offset, e.rows, e.cols};
}
template <typename S>
Eigen::Map<Mat<S>> ParamStore<S>::view(const std::string& name) {
  return view(index_of(name));
}
template <typename S>
Eigen::Map<const Mat<S>> ParamStore<S>::view(const std::string& name) const {
  return view(index_of(name));
}
template <typename S>
Eigen::Map<Mat<S>> ParamStore<S>::grad_view(size_t index) {
  const Entry& e = entries_[index];
  return {grad_.data() + e.offset, e.rows, e.cols};
}
template <typename S>
Eigen::Map<Mat<S>> ParamStore<S>::grad_view(const std::string& name) {
  return grad_view(index_of(name));
}

template <typename S>
void ParamStore<S>::zero_grad() {
  std::fill(grad_.begin(), grad_.end(), S(0));
}

template <typename S>
bool ParamStore<S>::all_finite() const {
  for (S v : data_)
    if (!std::isfinite(double(v))) return false;
  return true;
}

template <typename S>
ParamStore<S> make_param_store(const BackboneConfig& cfg) {
  cfg.validate();
  ParamStore<S> p;
  const int D = cfg.embed_dim;
  p.add("patch_embed.weight", D, cfg.patch_dim(), true);
  p.add("patch_embed.bias", D, 1, false);
  p.add("cls_token", D, 1, false);
  if (cfg.num_registers > 0) p.add("registers", D, cfg.num_registers, false);
  p.add("mask_token", D, 1, false);
  for (int l = 0; l < cfg.depth; ++l) {
    std::string b = "block" + std::to_string(l) + ".";
    p.add(b + "ln1.gamma", D, 1, false);
    p.add(b + "ln1.beta", D, 1, false);
    p.add(b + "attn.qkv.weight", 3 * D, D, true);
    p.add(b + "attn.qkv.bias", 3 * D, 1, false);
    p.add(b + "attn.out.weight", D, D, true);
    p.add(b + "attn.out.bias", D, 1, false);
    p.add(b + "ln2.gamma", D, 1, false);
    p.add(b + "ln2.beta", D, 1, false);
    p.add(b + "mlp.fc1.weight", 4 * D, D, true);
    p.add(b + "mlp.fc1.bias", 4 * D, 1, false);
    p.add(b + "mlp.fc2.weight", D, 4 * D, true);
    p.add(b + "mlp.fc2.bias", D, 1, false);
  }
  p.add("final_norm.gamma", D, 1, false);
  p.add("final_norm.beta", D, 1, false);

  const int H = cfg.head_hidden_dim, B = cfg.head_bottleneck_dim, I = cfg.ibot_head_dim;
  if (H > 0) {
    p.add("proto.fc1.weight", H, D, true);
    p.add("proto.fc1.bias", H, 1, false);
    p.add("proto.fc2.weight", H, H, true);
    p.add("proto.fc2.bias", H, 1, false);
    p.add("proto.fc3.weight", B, H, true);
    p.add("proto.fc3.bias", B, 1, false);
    p.add("ibot.fc1.weight", H, D, true);
    p.add("ibot.fc1.bias", H, 1, false);
    p.add("ibot.fc2.weight", I, H, true);
    p.add("ibot.fc2.bias", I, 1, false);
  } else {
    p.add("proto.fc.weight", B, D, true);
    p.add("proto.fc.bias", B, 1, false);
    p.add("ibot.fc.weight", I, D, true);
    p.add("ibot.fc.bias", I, 1, false);
  }
  p.add("proto.prototypes", cfg.prototype_count, B, true);
  p.finalize();
  return p;
}

template <typename S>
void init_params(ParamStore<S>& store, const BackboneConfig& cfg, uint64_t seed) {
  auto trunc_normal = [](Rng& r) {
    for (;;) {
      double z = r.normal();
      if (std::abs(z) <= 2.0) return 0.02 * z;
    }
  };
  const auto& entries = store.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    Rng r = Rng::stream(seed, {kInitTag, uint64_t(i)});
    auto m = store.view(i);
    bool is_gamma = e.name.find("gamma") != std::string::npos;
    bool is_bias = e.name.find("bias") != std::string::npos;
    bool is_beta = e.name.find("beta") != std::string::npos;
    bool is_token = e.name == "cls_token" || e.name == "registers";
    if (is_gamma) {
      m.setOnes();
    } else if (is_bias || is_beta || is_token) {
      m.setZero();
    } else {
      for (int c = 0; c < e.cols; ++c)
        for (int rr = 0; rr < e.rows; ++rr) m(rr, c) = S(trunc_normal(r));
    }
  }
  renormalize_prototypes(store);
}

template <typename S>
void renormalize_prototypes(ParamStore<S>& store) {
  auto w = store.view("proto.prototypes");
  for (int k = 0; k < w.rows(); ++k) {
    S n = w.row(k).norm();
    if (n > S(0)) w.row(k) /= n;
  }
}

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& src, const BackboneConfig& cfg) {
  ParamStore<To> dst = make_param_store<To>(cfg);
  require(dst.data().size() == src.data().size(), ErrorKind::shape,
          "cast_params: stores disagree in size");
  for (size_t i = 0; i < src.data().size(); ++i) dst.data()[i] = To(src.data()[i]);
  return dst;
}

// ---------------------------------------------------------------------------
// Patchify and rotary embedding

template <typename S>
Mat<S> patchify(const Image& image, int patch_size) {
  require(image.height % patch_size == 0 && image.width % patch_size == 0, ErrorKind::shape,
          "image dims must be divisible by patch_size");
  const int gr = image.height / patch_size, gc = image.width / patch_size;
  const int pd = 3 * patch_size * patch_size;
  Mat<S> out(pd, gr * gc);
  for (int py = 0; py < gr; ++py) {
    for (int px = 0; px < gc; ++px) {
      int col = py * gc + px;
      int k = 0;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < patch_size; ++y)
          for (int x = 0; x < patch_size; ++x)
            out(k++, col) = S(2) * S(image.at(py * patch_size + y, px * patch_size + x, c)) - S(1);
    }
  }
  return out;
}

template <typename S>
void rope_apply(Eigen::Ref<Vec<S>> v, int row, int col, bool inverse) {
  const int dh = int(v.size());
  require(dh % 4 == 0, ErrorKind::config, "rotary head dim must be divisible by 4");
  const int pairs = dh / 4;
  const double sign = inverse ? -1.0 : 1.0;
  for (int axis = 0; axis < 2; ++axis) {
    const int base = axis * (dh / 2);
    const double pos = axis == 0 ? row : col;
    for (int t = 0; t < pairs; ++t) {
      double theta = sign * pos * rope_freq(t, pairs);
      S c = S(std::cos(theta)), s = S(std::sin(theta));
      S a = v(base + 2 * t), b = v(base + 2 * t + 1);
      v(base + 2 * t) = a * c - b * s;
      v(base + 2 * t + 1) = a * s + b * c;
    }
  }
}

// ---------------------------------------------------------------------------
// Encoder

template <typename S>
struct Encoder<S>::BlockCache {
  Mat<S> x_in;
  Mat<S> xhat1, y1;
  Vec<S> inv1;
  Mat<S> qkv;  // after rotation of q and k
  std::vector<Mat<S>> attn;  // [crop * heads + h], each tokens x tokens
  Mat<S> attn_out;
  Mat<S> x_mid;
  Mat<S> xhat2, y2;
  Vec<S> inv2;
  Mat<S> mlp_pre, mlp_act;
};

template <typename S>
Encoder<S>::Encoder(const BackboneConfig& cfg, const ParamStore<S>& params)
    : cfg_(cfg), params_(params) {
  cfg_.validate();
}

template <typename S>
Encoder<S>::~Encoder() = default;

template <typename S>
void Encoder<S>::forward(const std::vector<const Image*>& crops,
                         const std::vector<const std::vector<uint8_t>*>& masks,
                         bool keep_caches) {
  require(!crops.empty(), ErrorKind::invalid_argument, "encoder got an empty crop list");
  require(masks.empty() || masks.size() == crops.size(), ErrorKind::invalid_argument,
          "mask list size must match crop list size");
  require(params_.all_finite(), ErrorKind::numeric, "parameters contain NaN or Inf");
  const Image& first = *crops[0];
  require(first.height == first.width, ErrorKind::shape, "crops must be square");
  for (const Image* im : crops)
    require(im->height == first.height && im->width == first.width, ErrorKind::shape,
            "all crops of one forward must share a resolution");

  const int D = cfg_.embed_dim;
  grid_ = cfg_.grid_for(first.height);
  require(grid_ * cfg_.patch_size == first.height, ErrorKind::shape,
          "crop size must be divisible by patch_size");
  const int P = grid_ * grid_;
  n_tokens_ = 1 + cfg_.num_registers + P;
  n_crops_ = int(crops.size());
  const int T = n_tokens_, BT = n_crops_ * T;

  // patch pixels and token embedding
  pixels_.resize(cfg_.patch_dim(), n_crops_ * P);
  for (int c = 0; c < n_crops_; ++c)
    pixels_.middleCols(c * P, P) = patchify<S>(*crops[c], cfg_.patch_size);

  masks_.assign(n_crops_, {});
  for (size_t c = 0; c < masks.size(); ++c) {
    if (!masks[c] || masks[c]->empty()) continue;
    require(int(masks[c]->size()) == P, ErrorKind::shape,
            "patch mask length must equal the patch count");
    masks_[c] = *masks[c];
  }

  auto w_pe = params_.view("patch_embed.weight");
  auto b_pe = params_.view("patch_embed.bias");
  auto cls = params_.view("cls_token");
  auto mask_tok = params_.view("mask_token");

  x0_.resize(D, BT);
  Mat<S> projected = (w_pe * pixels_).colwise() + b_pe.col(0);
  for (int c = 0; c < n_crops_; ++c) {
    x0_.col(c * T) = cls.col(0);
    for (int r = 0; r < cfg_.num_registers; ++r)
      x0_.col(c * T + 1 + r) = params_.view("registers").col(r);
    for (int p = 0; p < P; ++p) {
      bool masked = !masks_[c].empty() && masks_[c][p];
      if (masked)
        x0_.col(c * T + 1 + cfg_.num_registers + p) = mask_tok.col(0);
      else
        x0_.col(c * T + 1 + cfg_.num_registers + p) = projected.col(c * P + p);
    }
  }

  // rotary tables per crop-local token and head-dim pair (both axes share the
  // layout: first half of each head rotates by row angle, second by column)
  const int dh = cfg_.head_dim(), pairs = dh / 4;
  rope_cos_.resize(T * 2 * pairs);
  rope_sin_.resize(T * 2 * pairs);
  for (int t = 0; t < T; ++t) {
    int pr = t - 1 - cfg_.num_registers;  // patch index, negative for cls/registers
    int row = pr >= 0 ? pr / grid_ : 0;
    int col = pr >= 0 ? pr % grid_ : 0;
    for (int axis = 0; axis < 2; ++axis) {
      double pos = axis == 0 ? row : col;
      for (int q = 0; q < pairs; ++q) {
        double theta = pos * rope_freq(q, pairs);
        rope_cos_(t * 2 * pairs + axis * pairs + q) = S(std::cos(theta));
        rope_sin_(t * 2 * pairs + axis * pairs + q) = S(std::sin(theta));
      }
    }
  }

  auto rotate_block = [&](Mat<S>& m, int head_row0, bool inverse) {
    // rotates rows [head_row0, head_row0 + dh) of m for every token column
    for (int j = 0; j < BT; ++j) {
      int t = j % T;
      for (int axis = 0; axis < 2; ++axis) {
        int base = head_row0 + axis * (dh / 2);
        for (int q = 0; q < pairs; ++q) {
          S c = rope_cos_(t * 2 * pairs + axis * pairs + q);
          S s = rope_sin_(t * 2 * pairs + axis * pairs + q);
          if (inverse) s = -s;
          S a = m(base + 2 * q, j), b = m(base + 2 * q + 1, j);
          m(base + 2 * q, j) = a * c - b * s;
          m(base + 2 * q + 1, j) = a * s + b * c;
        }
      }
    }
  };

  caches_.clear();
  caches_.resize(cfg_.depth);
  const S inv_sqrt_dh = S(1) / std::sqrt(S(dh));
  Mat<S> x = x0_;

  for (int l = 0; l < cfg_.depth; ++l) {
    BlockCache& cache = caches_[l];
    std::string b = "block" + std::to_string(l) + ".";
    cache.x_in = std::move(x);

    ln_forward(cache.x_in, params_.view(b + "ln1.gamma"), params_.view(b + "ln1.beta"), cache.y1,
               cache.xhat1, cache.inv1);

    cache.qkv.noalias() = params_.view(b + "attn.qkv.weight") * cache.y1;
    cache.qkv.colwise() += params_.view(b + "attn.qkv.bias").col(0);
    for (int h = 0; h < cfg_.num_heads; ++h) {
      rotate_block(cache.qkv, h * dh, false);          // queries
      rotate_block(cache.qkv, D + h * dh, false);      // keys
    }

    cache.attn.assign(size_t(n_crops_) * cfg_.num_heads, {});
    cache.attn_out.resize(D, BT);
    for (int c = 0; c < n_crops_; ++c) {
      for (int h = 0; h < cfg_.num_heads; ++h) {
        auto q = cache.qkv.block(h * dh, c * T, dh, T);
        auto k = cache.qkv.block(D + h * dh, c * T, dh, T);
        auto v = cache.qkv.block(2 * D + h * dh, c * T, dh, T);
        Mat<S>& a = cache.attn[size_t(c) * cfg_.num_heads + h];
        a.noalias() = k.transpose() * q;
        a *= inv_sqrt_dh;
        for (int j = 0; j < T; ++j) {  // softmax over keys, one query per column
          S mx = a.col(j).maxCoeff();
          a.col(j) = (a.col(j).array() - mx).exp();
          a.col(j) /= a.col(j).sum();
        }
        cache.attn_out.block(h * dh, c * T, dh, T).noalias() = v * a;
      }
    }

    cache.x_mid.noalias() = params_.view(b + "attn.out.weight") * cache.attn_out;
    cache.x_mid.colwise() += params_.view(b + "attn.out.bias").col(0);
    cache.x_mid += cache.x_in;

    ln_forward(cache.x_mid, params_.view(b + "ln2.gamma"), params_.view(b + "ln2.beta"), cache.y2,
               cache.xhat2, cache.inv2);
    cache.mlp_pre.noalias() = params_.view(b + "mlp.fc1.weight") * cache.y2;
    cache.mlp_pre.colwise() += params_.view(b + "mlp.fc1.bias").col(0);
    cache.mlp_act = cache.mlp_pre.unaryExpr([](S t) { return gelu(t); });
    x.noalias() = params_.view(b + "mlp.fc2.weight") * cache.mlp_act;
    x.colwise() += params_.view(b + "mlp.fc2.bias").col(0);
    x += cache.x_mid;
  }

  pre_final_ = std::move(x);
  ln_forward(pre_final_, params_.view("final_norm.gamma"), params_.view("final_norm.beta"), out_,
             xhat_final_, inv_final_);
  has_caches_ = keep_caches;
  if (!keep_caches) {
    caches_.clear();
    pixels_.resize(0, 0);
    x0_.resize(0, 0);
    pre_final_.resize(0, 0);
    xhat_final_.resize(0, 0);
    inv_final_.resize(0);
  }
}

template <typename S>
void Encoder<S>::backward(const Mat<S>& d_tokens, ParamStore<S>& grads) {
  require(has_caches_, ErrorKind::invalid_argument,
          "backward requires a forward with keep_caches=true");
  require(d_tokens.rows() == out_.rows() && d_tokens.cols() == out_.cols(), ErrorKind::shape,
          "d_tokens shape must match tokens()");
  const int D = cfg_.embed_dim, T = n_tokens_, BT = n_crops_ * T;
  const int dh = cfg_.head_dim(), pairs = dh / 4;
  const int P = grid_ * grid_;
  const S inv_sqrt_dh = S(1) / std::sqrt(S(dh));

  auto rotate_block = [&](Mat<S>& m, int head_row0, bool inverse) {
    for (int j = 0; j < BT; ++j) {
      int t = j % T;
      for (int axis = 0; axis < 2; ++axis) {
        int base = head_row0 + axis * (dh / 2);
        for (int q = 0; q < pairs; ++q) {
          S c = rope_cos_(t * 2 * pairs + axis * pairs + q);
          S s = rope_sin_(t * 2 * pairs + axis * pairs + q);
          if (inverse) s = -s;
          S a = m(base + 2 * q, j), b2 = m(base + 2 * q + 1, j);
          m(base + 2 * q, j) = a * c - b2 * s;
          m(base + 2 * q + 1, j) = a * s + b2 * c;
        }
      }
    }
  };

  Mat<S> dx;
  ln_backward(d_tokens, xhat_final_, inv_final_, params_.view("final_norm.gamma"),
              grads.grad_view("final_norm.gamma"), grads.grad_view("final_norm.beta"), dx);

  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const BlockCache& cache = caches_[l];
    std::string b = "block" + std::to_string(l) + ".";

    // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
    grads.grad_view(b + "mlp.fc2.weight").noalias() += dx * cache.mlp_act.transpose();
    grads.grad_view(b + "mlp.fc2.bias").col(0) += dx.rowwise().sum();
    Mat<S> da = params_.view(b + "mlp.fc2.weight").transpose() * dx;
    Mat<S> dpre =
        da.array() * cache.mlp_pre.unaryExpr([](S t) { return gelu_grad(t); }).array();
    grads.grad_view(b + "mlp.fc1.weight").noalias() += dpre * cache.y2.transpose();
    grads.grad_view(b + "mlp.fc1.bias").col(0) += dpre.rowwise().sum();
    Mat<S> dy2 = params_.view(b + "mlp.fc1.weight").transpose() * dpre;
    Mat<S> dmid;
    ln_backward(dy2, cache.xhat2, cache.inv2, params_.view(b + "ln2.gamma"),
                grads.grad_view(b + "ln2.gamma"), grads.grad_view(b + "ln2.beta"), dmid);
    dmid += dx;

    // x_mid = x_in + out_proj(attention(ln1(x_in)))
    grads.grad_view(b + "attn.out.weight").noalias() += dmid * cache.attn_out.transpose();
    grads.grad_view(b + "attn.out.bias").col(0) += dmid.rowwise().sum();
    Mat<S> dO = params_.view(b + "attn.out.weight").transpose() * dmid;

    Mat<S> dqkv = Mat<S>::Zero(3 * D, BT);
    for (int c = 0; c < n_crops_; ++c) {
      for (int h = 0; h < cfg_.num_heads; ++h) {
        auto q = cache.qkv.block(h * dh, c * T, dh, T);
        auto k = cache.qkv.block(D + h * dh, c * T, dh, T);
        auto v = cache.qkv.block(2 * D + h * dh, c * T, dh, T);
        const Mat<S>& a = cache.attn[size_t(c) * cfg_.num_heads + h];
        auto dOh = dO.block(h * dh, c * T, dh, T);

        dqkv.block(2 * D + h * dh, c * T, dh, T).noalias() = dOh * a.transpose();
        Mat<S> da_attn = v.transpose() * dOh;
        Mat<S> ds(T, T);
        for (int j = 0; j < T; ++j) {
          S dot = a.col(j).dot(da_attn.col(j));
          ds.col(j) = a.col(j).array() * (da_attn.col(j).array() - dot);
        }
        ds *= inv_sqrt_dh;
        dqkv.block(h * dh, c * T, dh, T).noalias() = k * ds;
        dqkv.block(D + h * dh, c * T, dh, T).noalias() = q * ds.transpose();
      }
    }
    for (int h = 0; h < cfg_.num_heads; ++h) {
      rotate_block(dqkv, h * dh, true);
      rotate_block(dqkv, D + h * dh, true);
    }

    grads.grad_view(b + "attn.qkv.weight").noalias() += dqkv * cache.y1.transpose();
    grads.grad_view(b + "attn.qkv.bias").col(0) += dqkv.rowwise().sum();
    Mat<S> dy1 = params_.view(b + "attn.qkv.weight").transpose() * dqkv;
    Mat<S> dxin;
    ln_backward(dy1, cache.xhat1, cache.inv1, params_.view(b + "ln1.gamma"),
                grads.grad_view(b + "ln1.gamma"), grads.grad_view(b + "ln1.beta"), dxin);
    dx = dmid + dxin;
  }

  // token embedding backward
  auto d_cls = grads.grad_view("cls_token");
  auto d_mask = grads.grad_view("mask_token");
  Mat<S> d_patches = Mat<S>::Zero(D, n_crops_ * P);
  for (int c = 0; c < n_crops_; ++c) {
    d_cls.col(0) += dx.col(c * T);
    for (int r = 0; r < cfg_.num_registers; ++r)
      grads.grad_view("registers").col(r) += dx.col(c * T + 1 + r);
    for (int p = 0; p < P; ++p) {
      bool masked = !masks_[c].empty() && masks_[c][p];
      if (masked)
        d_mask.col(0) += dx.col(c * T + 1 + cfg_.num_registers + p);
      else
        d_patches.col(c * P + p) = dx.col(c * T + 1 + cfg_.num_registers + p);
    }
  }
  grads.grad_view("patch_embed.weight").noalias() += d_patches * pixels_.transpose();
  grads.grad_view("patch_embed.bias").col(0) += d_patches.rowwise().sum();
}

FeatureSet encode(const Image& image, const ParamStore<float>& params,
                  const BackboneConfig& cfg) {
  Encoder<float> enc(cfg, params);
  enc.forward({&image}, {}, false);
  const auto& tok = enc.tokens();
  FeatureSet f;
  f.dim = cfg.embed_dim;
  f.grid_rows = enc.grid();
  f.grid_cols = enc.grid();
  f.cls.resize(cfg.embed_dim);
  for (int d = 0; d < cfg.embed_dim; ++d) f.cls[d] = tok(d, 0);
  f.registers.resize(size_t(cfg.num_registers) * cfg.embed_dim);
  for (int r = 0; r < cfg.num_registers; ++r)
    for (int d = 0; d < cfg.embed_dim; ++d)
      f.registers[size_t(r) * cfg.embed_dim + d] = tok(d, 1 + r);
  const int P = enc.grid() * enc.grid();
  f.patches.resize(size_t(P) * cfg.embed_dim);
  for (int p = 0; p < P; ++p)
    for (int d = 0; d < cfg.embed_dim; ++d)
      f.patches[size_t(p) * cfg.embed_dim + d] = tok(d, enc.patch_col(0, p));
  return f;
}

// ---------------------------------------------------------------------------
// Heads

template <typename S>
void proto_forward(const BackboneConfig& cfg, const ParamStore<S>& params, const Mat<S>& cls,
                   ProtoTrace<S>& trace) {
  trace.input = cls;
  const int n = int(cls.cols());
  if (cfg.head_hidden_dim > 0) {
    trace.pre1.noalias() = params.view("proto.fc1.weight") * cls;
    trace.pre1.colwise() += params.view("proto.fc1.bias").col(0);
    trace.act1 = trace.pre1.unaryExpr([](S t) { return gelu(t); });
    trace.pre2.noalias() = params.view("proto.fc2.weight") * trace.act1;
    trace.pre2.colwise() += params.view("proto.fc2.bias").col(0);
    trace.act2 = trace.pre2.unaryExpr([](S t) { return gelu(t); });
    trace.bott.noalias() = params.view("proto.fc3.weight") * trace.act2;
    trace.bott.colwise() += params.view("proto.fc3.bias").col(0);
  } else {
    trace.bott.noalias() = params.view("proto.fc.weight") * cls;
    trace.bott.colwise() += params.view("proto.fc.bias").col(0);
  }
  trace.inv_norm.resize(n);
  trace.z.resize(trace.bott.rows(), n);
  for (int i = 0; i < n; ++i) {
    S nn = std::sqrt(trace.bott.col(i).squaredNorm() + S(1e-24));
    trace.inv_norm(i) = S(1) / nn;
    trace.z.col(i) = trace.bott.col(i) * trace.inv_norm(i);
  }
  trace.logits.noalias() = params.view("proto.prototypes") * trace.z;
}

template <typename S>
void proto_backward(const BackboneConfig& cfg, const ParamStore<S>& params,
                    const ProtoTrace<S>& trace, const Mat<S>& d_logits, ParamStore<S>& grads,
                    Mat<S>& d_input) {
  grads.grad_view("proto.prototypes").noalias() += d_logits * trace.z.transpose();
  Mat<S> dz = params.view("proto.prototypes").transpose() * d_logits;
  Mat<S> db(trace.bott.rows(), trace.bott.cols());
  for (int i = 0; i < dz.cols(); ++i) {
    S dot = trace.z.col(i).dot(dz.col(i));
    db.col(i) = (dz.col(i) - trace.z.col(i) * dot) * trace.inv_norm(i);
  }
  if (cfg.head_hidden_dim > 0) {
    grads.grad_view("proto.fc3.weight").noalias() += db * trace.act2.transpose();
    grads.grad_view("proto.fc3.bias").col(0) += db.rowwise().sum();
    Mat<S> da2 = params.view("proto.fc3.weight").transpose() * db;
    Mat<S> dp2 = da2.array() * trace.pre2.unaryExpr([](S t) { return gelu_grad(t); }).array();
    grads.grad_view("proto.fc2.weight").noalias() += dp2 * trace.act1.transpose();
    grads.grad_view("proto.fc2.bias").col(0) += dp2.rowwise().sum();
    Mat<S> da1 = params.view("proto.fc2.weight").transpose() * dp2;
    Mat<S> dp1 = da1.array() * trace.pre1.unaryExpr([](S t) { return gelu_grad(t); }).array();
    grads.grad_view("proto.fc1.weight").noalias() += dp1 * trace.input.transpose();
    grads.grad_view("proto.fc1.bias").col(0) += dp1.rowwise().sum();
    d_input.noalias() = params.view("proto.fc1.weight").transpose() * dp1;
  } else {
    grads.grad_view("proto.fc.weight").noalias() += db * trace.input.transpose();
    grads.grad_view("proto.fc.bias").col(0) += db.rowwise().sum();
    d_input.noalias() = params.view("proto.fc.weight").transpose() * db;
  }
}

template <typename S>
void ibot_forward(const BackboneConfig& cfg, const ParamStore<S>& params, const Mat<S>& patches,
                  IbotTrace<S>& trace) {
  trace.input = patches;
  if (cfg.head_hidden_dim > 0) {
    trace.pre1.noalias() = params.view("ibot.fc1.weight") * patches;
    trace.pre1.colwise() += params.view("ibot.fc1.bias").col(0);
    trace.act1 = trace.pre1.unaryExpr([](S t) { return gelu(t); });
    trace.out.noalias() = params.view("ibot.fc2.weight") * trace.act1;
    trace.out.colwise() += params.view("ibot.fc2.bias").col(0);
  } else {
    trace.out.noalias() = params.view("ibot.fc.weight") * patches;
    trace.out.colwise() += params.view("ibot.fc.bias").col(0);
  }
}

template <typename S>
void ibot_backward(const BackboneConfig& cfg, const ParamStore<S>& params,
                   const IbotTrace<S>& trace, const Mat<S>& d_out, ParamStore<S>& grads,
                   Mat<S>& d_input) {
  if (cfg.head_hidden_dim > 0) {
    grads.grad_view("ibot.fc2.weight").noalias() += d_out * trace.act1.transpose();
    grads.grad_view("ibot.fc2.bias").col(0) += d_out.rowwise().sum();
    Mat<S> da = params.view("ibot.fc2.weight").transpose() * d_out;
    Mat<S> dp = da.array() * trace.pre1.unaryExpr([](S t) { return gelu_grad(t); }).array();
    grads.grad_view("ibot.fc1.weight").noalias() += dp * trace.input.transpose();
    grads.grad_view("ibot.fc1.bias").col(0) += dp.rowwise().sum();
    d_input.noalias() = params.view("ibot.fc1.weight").transpose() * dp;
  } else {
    grads.grad_view("ibot.fc.weight").noalias() += d_out * trace.input.transpose();
    grads.grad_view("ibot.fc.bias").col(0) += d_out.rowwise().sum();
    d_input.noalias() = params.view("ibot.fc.weight").transpose() * d_out;
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

std::string config_to_json(const BackboneConfig& cfg) {
  nlohmann::json j{{"image_size", cfg.image_size},
                   {"patch_size", cfg.patch_size},
                   {"embed_dim", cfg.embed_dim},
                   {"depth", cfg.depth},
                   {"num_heads", cfg.num_heads},
                   {"num_registers", cfg.num_registers},
                   {"prototype_count", cfg.prototype_count},
                   {"head_hidden_dim", cfg.head_hidden_dim},
                   {"head_bottleneck_dim", cfg.head_bottleneck_dim},
                   {"ibot_head_dim", cfg.ibot_head_dim}};
  return j.dump();
}

BackboneConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("bad backbone config json: ") + e.what());
  }
  BackboneConfig cfg;
  try {
    cfg.image_size = j.at("image_size").get<int>();
    cfg.patch_size = j.at("patch_size").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.depth = j.at("depth").get<int>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.num_registers = j.at("num_registers").get<int>();
    cfg.prototype_count = j.at("prototype_count").get<int>();
    cfg.head_hidden_dim = j.at("head_hidden_dim").get<int>();
    cfg.head_bottleneck_dim = j.at("head_bottleneck_dim").get<int>();
    cfg.ibot_head_dim = j.at("ibot_head_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("backbone config json missing fields: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_backbone(const std::string& path, const BackboneConfig& cfg,
                   const ParamStore<float>& params) {
  TensorFile tf;
  tf.meta_json = std::string("{\"kind\":\"backbone\",\"format\":1,\"config\":") +
                 config_to_json(cfg) + "}";
  for (size_t i = 0; i < params.entries().size(); ++i) {
    const auto& e = params.entries()[i];
    std::vector<float> v(size_t(e.rows) * e.cols);
    std::memcpy(v.data(), params.data().data() + e.offset, v.size() * sizeof(float));
    tf.arrays.push_back(pack_f32(e.name, v, e.rows, e.cols));
  }
  write_tensor_file(path, tf);
}

std::pair<BackboneConfig, ParamStore<float>> load_backbone(const std::string& path) {
  TensorFile tf = read_tensor_file(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(tf.meta_json);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, path + ": bad checkpoint metadata: " + e.what());
  }
  require(meta.value("kind", "") == "backbone", ErrorKind::io,
          path + " is not a backbone checkpoint");
  BackboneConfig cfg = config_from_json(meta.at("config").dump());
  ParamStore<float> params = make_param_store<float>(cfg);
  for (size_t i = 0; i < params.entries().size(); ++i) {
    const auto& e = params.entries()[i];
    const NamedArray& a = tf.find(e.name);
    require(a.rows == e.rows && a.cols == e.cols, ErrorKind::shape,
            path + ": array '" + e.name + "' shape mismatch");
    auto v = unpack_f32(a);
    std::memcpy(params.data().data() + e.offset, v.data(), v.size() * sizeof(float));
  }
  return {cfg, std::move(params)};
}

// ---------------------------------------------------------------------------
// Explicit instantiations: float for training/inference, double for the
// finite-difference gradient checks.

template class ParamStore<float>;
template class ParamStore<double>;
template ParamStore<float> make_param_store<float>(const BackboneConfig&);
template ParamStore<double> make_param_store<double>(const BackboneConfig&);
template void init_params<float>(ParamStore<float>&, const BackboneConfig&, uint64_t);
template void init_params<double>(ParamStore<double>&, const BackboneConfig&, uint64_t);
template void renormalize_prototypes<float>(ParamStore<float>&);
template void renormalize_prototypes<double>(ParamStore<double>&);
template ParamStore<float> cast_params<float, double>(const ParamStore<double>&,
                                                      const BackboneConfig&);
template ParamStore<double> cast_params<double, float>(const ParamStore<float>&,
                                                       const BackboneConfig&);
template Mat<float> patchify<float>(const Image&, int);
template Mat<double> patchify<double>(const Image&, int);
template void rope_apply<float>(Eigen::Ref<Vec<float>>, int, int, bool);
template void rope_apply<double>(Eigen::Ref<Vec<double>>, int, int, bool);
template class Encoder<float>;
template class Encoder<double>;
template void proto_forward<float>(const BackboneConfig&, const ParamStore<float>&,
                                   const Mat<float>&, ProtoTrace<float>&);
template void proto_forward<double>(const BackboneConfig&, const ParamStore<double>&,
                                    const Mat<double>&, ProtoTrace<double>&);
template void proto_backward<float>(const BackboneConfig&, const ParamStore<float>&,
                                    const ProtoTrace<float>&, const Mat<float>&,
                                    ParamStore<float>&, Mat<float>&);
template void proto_backward<double>(const BackboneConfig&, const ParamStore<double>&,
                                     const ProtoTrace<double>&, const Mat<double>&,
                                     ParamStore<double>&, Mat<double>&);
template void ibot_forward<float>(const BackboneConfig&, const ParamStore<float>&,
                                  const Mat<float>&, IbotTrace<float>&);
template void ibot_forward<double>(const BackboneConfig&, const ParamStore<double>&,
                                   const Mat<double>&, IbotTrace<double>&);
template void ibot_backward<float>(const BackboneConfig&, const ParamStore<float>&,
                                   const IbotTrace<float>&, const Mat<float>&, ParamStore<float>&,
                                   Mat<float>&);
template void ibot_backward<double>(const BackboneConfig&, const ParamStore<double>&,
                                    const IbotTrace<double>&, const Mat<double>&,
                                    ParamStore<double>&, Mat<double>&);

}  // namespace phieat::backbone
