#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "phieat/backbone/backbone.hpp"
#include "phieat/core/errors.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/core/tensor_file.hpp"

using namespace phieat;
using namespace phieat::backbone;

namespace {

Image random_image(int size, uint64_t seed) {
  Image im(size, size);
  Rng r = Rng::stream(seed, {0x696d67});
  for (float& v : im.data) v = float(r.uniform());
  return im;
}

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.embed_dim = 32;
  cfg.depth = 2;
  cfg.num_heads = 2;
  cfg.num_registers = 2;
  cfg.prototype_count = 16;
  cfg.head_hidden_dim = 24;
  cfg.head_bottleneck_dim = 12;
  cfg.ibot_head_dim = 10;
  return cfg;
}

}  // namespace

TEST_CASE("tensor file round trips named arrays and metadata") {
  TensorFile tf;
  tf.meta_json = "{\"purpose\":\"test\"}";
  std::vector<float> a{1.5f, -2.25f, 0.f, 4.f, 5.f, 6.f};
  std::vector<double> b{1e-300, 3.14159, -7.0};
  std::vector<int64_t> c{-5, 0, 1ll << 40};
  tf.arrays.push_back(pack_f32("a", a, 2, 3));
  tf.arrays.push_back(pack_f64("b", b, 3, 1));
  tf.arrays.push_back(pack_i64("c", c, 1, 3));

  auto path = std::filesystem::temp_directory_path() / "phieat_tf_test.bin";
  write_tensor_file(path.string(), tf);
  TensorFile back = read_tensor_file(path.string());
  CHECK(back.meta_json == tf.meta_json);
  CHECK(back.arrays.size() == 3);
  CHECK(unpack_f32(back.find("a")) == a);
  CHECK(unpack_f64(back.find("b")) == b);
  CHECK(unpack_i64(back.find("c")) == c);
  CHECK(back.find("a").rows == 2);
  CHECK(back.find("a").cols == 3);
  CHECK_THROWS_AS((void)back.find("nope"), Error);
  std::filesystem::remove(path);
}

TEST_CASE("patchify extracts 3*ps^2 values per patch in [-1,1]") {
  Image im(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) im.at(y, x, c) = float((y * 16 + x) % 7) / 6.f;
  auto m = patchify<double>(im, 8);
  CHECK(m.rows() == 192);
  CHECK(m.cols() == 4);
  CHECK(m.minCoeff() >= -1.0);
  CHECK(m.maxCoeff() <= 1.0);
  // constant image maps to a constant matrix at 2v-1
  Image flat(8, 8);
  for (float& v : flat.data) v = 0.25f;
  auto f = patchify<double>(flat, 8);
  CHECK(f.cols() == 1);
  CHECK(f.minCoeff() == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(f.maxCoeff() == doctest::Approx(-0.5).epsilon(1e-12));
  // patch (0,0) top-left pixel of channel 0 is element 0
  Image probe(16, 16);
  for (float& v : probe.data) v = 0.f;
  probe.at(0, 0, 0) = 1.f;
  auto p = patchify<double>(probe, 8);
  CHECK(p(0, 0) == doctest::Approx(1.0));
  CHECK(p(1, 0) == doctest::Approx(-1.0));
}

TEST_CASE("rotary embedding is the identity at the origin and preserves norm") {
  Rng r = Rng::stream(7, {0x726f7065});
  Vec<double> v(16);
  for (int i = 0; i < 16; ++i) v(i) = r.normal();
  Vec<double> w = v;
  rope_apply<double>(w, 0, 0, false);
  CHECK((w - v).cwiseAbs().maxCoeff() == 0.0);
  for (int row : {1, 3}) {
    for (int col : {0, 5}) {
      Vec<double> u = v;
      rope_apply<double>(u, row, col, false);
      CHECK(u.norm() == doctest::Approx(v.norm()).epsilon(1e-12));
      // inverse rotation undoes it
      rope_apply<double>(u, row, col, true);
      CHECK((u - v).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("rotary dot products depend only on relative grid offset") {
  Rng r = Rng::stream(11, {0x726f7065});
  Vec<double> q(16), k(16);
  for (int i = 0; i < 16; ++i) q(i) = r.normal();
  for (int i = 0; i < 16; ++i) k(i) = r.normal();
  auto rotated_dot = [&](int qr, int qc, int kr, int kc) {
    Vec<double> a = q, b = k;
    rope_apply<double>(a, qr, qc, false);
    rope_apply<double>(b, kr, kc, false);
    return a.dot(b);
  };
  // same offset (dr=2, dc=1) from three different absolute anchors
  double d1 = rotated_dot(2, 1, 0, 0);
  double d2 = rotated_dot(5, 4, 3, 3);
  double d3 = rotated_dot(3, 7, 1, 6);
  CHECK(d2 == doctest::Approx(d1).epsilon(1e-10));
  CHECK(d3 == doctest::Approx(d1).epsilon(1e-10));
  // a different offset must generically change the score
  double other = rotated_dot(1, 2, 0, 0);
  CHECK(std::abs(other - d1) > 1e-6);
}

TEST_CASE("encoder forward yields finite tokens of the expected shape") {
  BackboneConfig cfg = tiny_config();
  auto params = make_param_store<float>(cfg);
  init_params(params, cfg, 3);
  Encoder<float> enc(cfg, params);
  Image g = random_image(32, 1);
  Image g2 = random_image(32, 2);
  enc.forward({&g, &g2}, {}, false);
  const auto& tok = enc.tokens();
  // 32/8 -> 4x4 grid -> 1 cls + 2 registers + 16 patches
  CHECK(enc.tokens_per_crop() == 19);
  CHECK(tok.rows() == 32);
  CHECK(tok.cols() == 38);
  CHECK(tok.allFinite());
  // two different crops give different cls columns
  CHECK((tok.col(enc.cls_col(0)) - tok.col(enc.cls_col(1))).norm() > 1e-4);
}

TEST_CASE("encoder handles different crop resolutions without padding") {
  BackboneConfig cfg = tiny_config();
  auto params = make_param_store<float>(cfg);
  init_params(params, cfg, 3);
  Image big = random_image(32, 4);
  Image small = random_image(16, 5);
  Encoder<float> e1(cfg, params), e2(cfg, params);
  e1.forward({&big}, {}, false);
  CHECK(e1.tokens_per_crop() == 1 + 2 + 16);
  e2.forward({&small}, {}, false);
  CHECK(e2.tokens_per_crop() == 1 + 2 + 4);
  CHECK(e2.tokens().allFinite());
}

TEST_CASE("crops in one batch do not interact: order permutes columns only") {
  BackboneConfig cfg = tiny_config();
  auto params = make_param_store<float>(cfg);
  init_params(params, cfg, 9);
  Image a = random_image(32, 10), b = random_image(32, 11), c = random_image(32, 12);
  Encoder<float> fwd(cfg, params), rev(cfg, params);
  fwd.forward({&a, &b, &c}, {}, false);
  rev.forward({&c, &a, &b}, {}, false);
  const int T = fwd.tokens_per_crop();
  auto block_fwd = [&](int i) { return fwd.tokens().middleCols(i * T, T); };
  auto block_rev = [&](int i) { return rev.tokens().middleCols(i * T, T); };
  CHECK((block_fwd(0) - block_rev(1)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((block_fwd(1) - block_rev(2)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((block_fwd(2) - block_rev(0)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("masked patches take the mask token pathway") {
  BackboneConfig cfg = tiny_config();
  cfg.depth = 1;
  auto params = make_param_store<float>(cfg);
  init_params(params, cfg, 21);
  Image a = random_image(16, 30), b = random_image(16, 31);  // 4 patches each
  std::vector<uint8_t> mask_all(4, 1);
  Encoder<float> enc(cfg, params);
  enc.forward({&a, &b}, {&mask_all, &mask_all}, false);
  const auto& tok = enc.tokens();
  const int T = enc.tokens_per_crop();
  // with every patch masked, the two crops carry identical token content
  CHECK((tok.middleCols(0, T) - tok.middleCols(T, T)).cwiseAbs().maxCoeff() < 1e-6);
  // unmasked runs differ between the two images
  Encoder<float> plain(cfg, params);
  plain.forward({&a, &b}, {}, false);
  CHECK((plain.tokens().middleCols(0, T) - plain.tokens().middleCols(T, T))
            .cwiseAbs()
            .maxCoeff() > 1e-5);
}

TEST_CASE("parameter registry covers both head layouts and decay flags") {
  BackboneConfig cfg = tiny_config();
  auto p = make_param_store<float>(cfg);
  CHECK_NOTHROW((void)p.view("proto.fc3.weight"));
  CHECK_NOTHROW((void)p.view("ibot.fc2.weight"));
  CHECK_THROWS_AS((void)p.view("proto.fc.weight"), Error);
  for (const auto& e : p.entries()) {
    bool is_matrix_weight = e.cols > 1 && e.name != "registers";
    CHECK(e.decay == is_matrix_weight);
  }
  BackboneConfig lin = cfg;
  lin.head_hidden_dim = 0;
  auto q = make_param_store<float>(lin);
  CHECK_NOTHROW((void)q.view("proto.fc.weight"));
  CHECK_THROWS_AS((void)q.view("proto.fc1.weight"), Error);

  // init invariants: gammas one, biases/cls/registers zero, prototypes unit rows
  init_params(p, cfg, 0);
  CHECK(p.view("block0.ln1.gamma").minCoeff() == 1.f);
  CHECK(p.view("cls_token").cwiseAbs().maxCoeff() == 0.f);
  CHECK(p.view("registers").cwiseAbs().maxCoeff() == 0.f);
  CHECK(p.view("patch_embed.bias").cwiseAbs().maxCoeff() == 0.f);
  CHECK(p.view("patch_embed.weight").cwiseAbs().maxCoeff() <= 0.04f);
  CHECK(p.view("patch_embed.weight").cwiseAbs().maxCoeff() > 0.f);
  auto protos = p.view("proto.prototypes");
  for (int k = 0; k < protos.rows(); ++k)
    CHECK(protos.row(k).norm() == doctest::Approx(1.f).epsilon(1e-5));
  CHECK(p.all_finite());
}

TEST_CASE("prototype logits are cosine scores in [-1, 1]") {
  BackboneConfig cfg = tiny_config();
  auto params = make_param_store<double>(cfg);
  init_params(params, cfg, 5);
  Rng r = Rng::stream(6, {0x636c73});
  Mat<double> cls(cfg.embed_dim, 7);
  for (int i = 0; i < cls.size(); ++i) cls.data()[i] = r.normal();
  ProtoTrace<double> trace;
  proto_forward(cfg, params, cls, trace);
  CHECK(trace.logits.rows() == cfg.prototype_count);
  CHECK(trace.logits.cols() == 7);
  CHECK(trace.logits.maxCoeff() <= 1.0 + 1e-9);
  CHECK(trace.logits.minCoeff() >= -1.0 - 1e-9);
  for (int i = 0; i < 7; ++i)
    CHECK(trace.z.col(i).norm() == doctest::Approx(1.0).epsilon(1e-9));

  // duplicated prototype rows produce identical logits rows
  auto protos = params.view("proto.prototypes");
  protos.row(3) = protos.row(0);
  ProtoTrace<double> t2;
  proto_forward(cfg, params, cls, t2);
  CHECK((t2.logits.row(3) - t2.logits.row(0)).cwiseAbs().maxCoeff() == 0.0);

  // brute-force oracle: logits match explicit dot products
  for (int i = 0; i < 7; ++i)
    for (int k = 0; k < cfg.prototype_count; ++k) {
      double dot = protos.row(k).transpose().dot(t2.z.col(i));
      CHECK(t2.logits(k, i) == doctest::Approx(dot).epsilon(1e-12));
    }
}

TEST_CASE("single-linear heads are linear maps") {
  BackboneConfig cfg = tiny_config();
  cfg.head_hidden_dim = 0;
  auto params = make_param_store<double>(cfg);
  init_params(params, cfg, 8);
  params.view("ibot.fc.bias").setZero();
  Rng r = Rng::stream(9, {0x6c696e});
  Mat<double> x(cfg.embed_dim, 3);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = r.normal();
  IbotTrace<double> t1, t2;
  ibot_forward(cfg, params, x, t1);
  CHECK(t1.out.rows() == cfg.ibot_head_dim);
  Mat<double> x2 = 2.0 * x;
  ibot_forward(cfg, params, x2, t2);
  CHECK((t2.out - 2.0 * t1.out).cwiseAbs().maxCoeff() < 1e-12);
}

namespace {

// Scalar probe losses for finite-difference checks. Each reduces the module
// output to one number with fixed mixing weights so every output coordinate
// influences the score.
template <typename Fwd>
double fd_probe(ParamStore<double>& params, size_t entry, int row, int col, double step,
                Fwd&& value) {
  auto v = params.view(entry);
  double orig = v(row, col);
  v(row, col) = orig + step;
  double up = value();
  v(row, col) = orig - step;
  double dn = value();
  v(row, col) = orig;
  return (up - dn) / (2 * step);
}

}  // namespace

TEST_CASE("encoder analytic gradients match central differences") {
  BackboneConfig cfg = tiny_config();  // depth 2, dim 32
  auto params = make_param_store<double>(cfg);
  init_params(params, cfg, 17);
  Image a = random_image(16, 40), b = random_image(16, 41);
  std::vector<uint8_t> mask{1, 0, 0, 1};  // exercises the mask-token path

  // probe vector fixed by a deterministic stream
  Rng r = Rng::stream(50, {0x70726f62});
  Encoder<double> enc(cfg, params);
  enc.forward({&a, &b}, {&mask, nullptr}, true);
  Mat<double> w(enc.tokens().rows(), enc.tokens().cols());
  for (int i = 0; i < w.size(); ++i) w.data()[i] = r.normal();

  auto loss_value = [&]() {
    Encoder<double> e(cfg, params);
    e.forward({&a, &b}, {&mask, nullptr}, false);
    return (e.tokens().array() * w.array()).sum();
  };

  auto grads = make_param_store<double>(cfg);
  enc.backward(w, grads);

  // spot-check a spread of parameters across every layer type
  struct Probe {
    const char* name;
    int row, col;
  };
  const Probe probes[] = {
      {"patch_embed.weight", 3, 17},  {"patch_embed.bias", 5, 0},
      {"cls_token", 1, 0},            {"registers", 2, 1},
      {"mask_token", 7, 0},           {"block0.ln1.gamma", 4, 0},
      {"block0.ln1.beta", 9, 0},      {"block0.attn.qkv.weight", 40, 12},
      {"block0.attn.qkv.bias", 70, 0},{"block0.attn.out.weight", 10, 20},
      {"block0.mlp.fc1.weight", 77, 8}, {"block0.mlp.fc2.weight", 20, 100},
      {"block1.ln2.gamma", 11, 0},    {"block1.attn.qkv.weight", 90, 5},
      {"block1.mlp.fc1.bias", 33, 0}, {"final_norm.gamma", 15, 0},
      {"final_norm.beta", 0, 0},
  };
  for (const Probe& p : probes) {
    CAPTURE(p.name);
    size_t idx = params.index_of(p.name);
    double numeric = fd_probe(params, idx, p.row, p.col, 1e-5, loss_value);
    double analytic = grads.grad_view(idx)(p.row, p.col);
    double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    CHECK(std::abs(numeric - analytic) / denom < 1e-4);
  }
}

TEST_CASE("head gradients match central differences") {
  BackboneConfig cfg = tiny_config();
  auto params = make_param_store<double>(cfg);
  init_params(params, cfg, 23);
  Rng r = Rng::stream(24, {0x68656164});
  Mat<double> x(cfg.embed_dim, 5);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = r.normal();

  SUBCASE("prototype head") {
    Mat<double> w(cfg.prototype_count, 5);
    for (int i = 0; i < w.size(); ++i) w.data()[i] = r.normal();
    auto value = [&]() {
      ProtoTrace<double> t;
      proto_forward(cfg, params, x, t);
      return (t.logits.array() * w.array()).sum();
    };
    ProtoTrace<double> t;
    proto_forward(cfg, params, x, t);
    auto grads = make_param_store<double>(cfg);
    Mat<double> dx;
    proto_backward(cfg, params, t, w, grads, dx);
    const char* names[] = {"proto.fc1.weight", "proto.fc2.weight", "proto.fc3.weight",
                           "proto.fc3.bias", "proto.prototypes"};
    for (const char* n : names) {
      CAPTURE(n);
      size_t idx = params.index_of(n);
      auto entry = params.entries()[idx];
      int row = entry.rows / 2, col = entry.cols / 2;
      double numeric = fd_probe(params, idx, row, col, 1e-6, value);
      double analytic = grads.grad_view(idx)(row, col);
      double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      CHECK(std::abs(numeric - analytic) / denom < 1e-4);
    }
    // input gradient
    double orig = x(4, 2);
    auto value_x = [&]() {
      ProtoTrace<double> tt;
      proto_forward(cfg, params, x, tt);
      return (tt.logits.array() * w.array()).sum();
    };
    x(4, 2) = orig + 1e-6;
    double up = value_x();
    x(4, 2) = orig - 1e-6;
    double dn = value_x();
    x(4, 2) = orig;
    double numeric = (up - dn) / 2e-6;
    CHECK(std::abs(numeric - dx(4, 2)) / std::max(std::abs(numeric), 1e-8) < 1e-4);
  }

  SUBCASE("patch head") {
    Mat<double> w(cfg.ibot_head_dim, 5);
    for (int i = 0; i < w.size(); ++i) w.data()[i] = r.normal();
    auto value = [&]() {
      IbotTrace<double> t;
      ibot_forward(cfg, params, x, t);
      return (t.out.array() * w.array()).sum();
    };
    IbotTrace<double> t;
    ibot_forward(cfg, params, x, t);
    auto grads = make_param_store<double>(cfg);
    Mat<double> dx;
    ibot_backward(cfg, params, t, w, grads, dx);
    for (const char* n : {"ibot.fc1.weight", "ibot.fc2.weight", "ibot.fc2.bias"}) {
      CAPTURE(n);
      size_t idx = params.index_of(n);
      auto entry = params.entries()[idx];
      int row = entry.rows - 1, col = entry.cols - 1;
      double numeric = fd_probe(params, idx, row, col, 1e-6, value);
      double analytic = grads.grad_view(idx)(row, col);
      double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      CHECK(std::abs(numeric - analytic) / denom < 1e-4);
    }
  }
}

TEST_CASE("encode produces per-image features in grid order") {
  BackboneConfig cfg = tiny_config();
  auto params = make_param_store<float>(cfg);
  init_params(params, cfg, 77);
  Image im = random_image(32, 78);
  FeatureSet f = encode(im, params, cfg);
  CHECK(f.dim == 32);
  CHECK(f.grid_rows == 4);
  CHECK(f.grid_cols == 4);
  CHECK(f.cls.size() == 32);
  CHECK(f.registers.size() == 2 * 32);
  CHECK(f.patches.size() == 16 * 32);
  for (float v : f.cls) CHECK(std::isfinite(v));

  // matches the raw encoder columns
  Encoder<float> enc(cfg, params);
  enc.forward({&im}, {}, false);
  for (int d = 0; d < 32; ++d)
    CHECK(f.cls[d] == enc.tokens()(d, 0));
  for (int p = 0; p < 16; ++p)
    for (int d = 0; d < 32; ++d)
      CHECK(f.patches[size_t(p) * 32 + d] == enc.tokens()(d, enc.patch_col(0, p)));
}

TEST_CASE("checkpoints round trip bit-exactly and reject shape changes") {
  BackboneConfig cfg = tiny_config();
  auto params = make_param_store<float>(cfg);
  init_params(params, cfg, 99);
  auto dir = std::filesystem::temp_directory_path() / "phieat_ckpt_test";
  std::filesystem::create_directories(dir);
  auto path = (dir / "backbone.bin").string();
  save_backbone(path, cfg, params);

  auto [cfg2, params2] = load_backbone(path);
  CHECK(cfg2.embed_dim == cfg.embed_dim);
  CHECK(cfg2.prototype_count == cfg.prototype_count);
  CHECK(params2.data().size() == params.data().size());
  CHECK(std::memcmp(params2.data().data(), params.data().data(),
                    params.data().size() * sizeof(float)) == 0);

  // same file, mismatched target config: loader rebuilds from stored config, so
  // corrupt the metadata instead to check the failure path
  TensorFile tf = read_tensor_file(path);
  tf.meta_json = "{\"kind\":\"other\"}";
  write_tensor_file(path, tf);
  CHECK_THROWS_AS((void)load_backbone(path), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config json round trips and validates") {
  BackboneConfig cfg = tiny_config();
  BackboneConfig back = config_from_json(config_to_json(cfg));
  CHECK(back.image_size == cfg.image_size);
  CHECK(back.ibot_head_dim == cfg.ibot_head_dim);
  CHECK_THROWS_AS((void)config_from_json("{}"), Error);
  BackboneConfig bad = cfg;
  bad.embed_dim = 30;  // not divisible by heads*4
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.image_size = 30;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("float and double stores cast losslessly for float values") {
  BackboneConfig cfg = tiny_config();
  auto pf = make_param_store<float>(cfg);
  init_params(pf, cfg, 13);
  auto pd = cast_params<double>(pf, cfg);
  auto pf2 = cast_params<float>(pd, cfg);
  CHECK(pf2.data() == pf.data());
}
