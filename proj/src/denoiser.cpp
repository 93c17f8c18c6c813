#include "draglab/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "draglab/errors.hpp"
#include "draglab/rng.hpp"

namespace draglab {

using ag::Var;

void DenoiserConfig::validate() const {
  if (decoder_blocks != 4) throw Error("decoder_blocks must be 4");
  if (base_channels < 8 || base_channels % kGroupNormGroups != 0) {
    throw Error("base_channels must be a positive multiple of 8");
  }
  if (num_classes < 1) throw Error("num_classes must be >= 1");
  if (image_channels < 1) throw Error("image_channels must be >= 1");
}

Denoiser::Denoiser(DenoiserConfig config) : config_(config) {
  config_.validate();
  const int c = config_.base_channels;
  const std::array<int, 4> ch{c, 2 * c, 3 * c, 4 * c};
  emb_dim_ = 4 * c;

  t1_ = make_dense("temb.fc1", emb_dim_, emb_dim_, false);
  t2_ = make_dense("temb.fc2", emb_dim_, emb_dim_, false);
  {
    CounterRng rng(config_.parameter_seed, init_counter_++);
    class_table_ = add_param("class_embedding",
                             rng.normal_tensor({emb_dim_, config_.num_classes + 1}, 0.5f));
  }
  stem_ = make_conv("stem", config_.image_channels, ch[0], 3, false);
  enc_[0] = make_res("enc0", ch[0], ch[0]);
  enc_[1] = make_res("enc1", ch[0], ch[1]);
  enc_[2] = make_res("enc2", ch[1], ch[2]);
  enc_[3] = make_res("enc3", ch[2], ch[3]);
  mid_ = make_res("mid", ch[3], ch[3]);
  mid_attn_ = make_attn("mid.attn", ch[3]);
  dec_[0] = make_res("dec1", ch[3] + ch[3], ch[3]);
  dec_attn_[0] = make_attn("dec1.attn", ch[3]);
  dec_[1] = make_res("dec2", ch[3] + ch[2], ch[2]);
  dec_attn_[1] = make_attn("dec2.attn", ch[2]);
  dec_[2] = make_res("dec3", ch[2] + ch[1], ch[1]);
  dec_[3] = make_res("dec4", ch[1] + ch[0], ch[0]);
  out_norm_ = make_norm("out.norm", ch[0]);
  out_conv_ = make_conv("out.conv", ch[0], config_.image_channels, 3, true);
}

Var Denoiser::add_param(const std::string& name, Tensor value) {
  Var v = ag::constant(std::move(value));
  params_.emplace_back(name, v);
  return v;
}

Denoiser::Conv Denoiser::make_conv(const std::string& name, int cin, int cout, int k, bool zero) {
  CounterRng rng(config_.parameter_seed, init_counter_++);
  const float std = zero ? 0.0f : static_cast<float>(std::sqrt(2.0 / (cin * k * k)));
  Tensor w = zero ? Tensor({cout, cin, k, k}) : rng.normal_tensor({cout, cin, k, k}, std);
  return {add_param(name + ".weight", std::move(w)), add_param(name + ".bias", Tensor({cout}))};
}

Denoiser::Norm Denoiser::make_norm(const std::string& name, int c) {
  ++init_counter_;
  return {add_param(name + ".gamma", Tensor({c}, 1.0f)), add_param(name + ".beta", Tensor({c}))};
}

Denoiser::Dense Denoiser::make_dense(const std::string& name, int in, int out, bool zero) {
  CounterRng rng(config_.parameter_seed, init_counter_++);
  const float std = zero ? 0.0f : static_cast<float>(std::sqrt(1.0 / in));
  Tensor w = zero ? Tensor({out, in}) : rng.normal_tensor({out, in}, std);
  return {add_param(name + ".weight", std::move(w)), add_param(name + ".bias", Tensor({out}))};
}

Denoiser::ResBlock Denoiser::make_res(const std::string& name, int cin, int cout) {
  ResBlock r;
  r.n1 = make_norm(name + ".norm1", cin);
  r.c1 = make_conv(name + ".conv1", cin, cout, 3, false);
  r.emb = make_dense(name + ".emb", emb_dim_, cout, false);
  r.n2 = make_norm(name + ".norm2", cout);
  r.c2 = make_conv(name + ".conv2", cout, cout, 3, true);
  if (cin != cout) r.skip = make_conv(name + ".skip", cin, cout, 1, false);
  return r;
}

Denoiser::AttnBlock Denoiser::make_attn(const std::string& name, int dim) {
  AttnBlock a;
  a.name = name;
  a.dim = dim;
  a.n = make_norm(name + ".norm", dim);
  a.q = make_dense(name + ".q", dim, dim, false);
  a.k = make_dense(name + ".k", dim, dim, false);
  a.v = make_dense(name + ".v", dim, dim, false);
  a.o = make_dense(name + ".o", dim, dim, true);
  return a;
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p->value.size();
  return n;
}

Denoiser Denoiser::clone() const {
  Denoiser copy(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    copy.params_[i].second->value = params_[i].second->value;
  }
  return copy;
}

void Denoiser::set_trainable(bool trainable) {
  for (auto& [name, p] : params_) p->requires_grad = trainable;
}

void Denoiser::zero_grad() {
  for (auto& [name, p] : params_) p->grad = Tensor();
}

void Denoiser::validate_adapters(const AdapterMap& adapters) const {
  const std::vector<AttentionProjection> projections = attention_projections();
  for (const auto& [name, a] : adapters) {
    auto it = std::find_if(projections.begin(), projections.end(),
                           [&](const AttentionProjection& p) { return p.name == name; });
    if (it == projections.end()) throw AdapterError("adapter for unknown projection '" + name + "'");
    const Tensor& down = a.down->value;
    const Tensor& up = a.up->value;
    if (down.rank() != 2 || up.rank() != 2 || down.dim(1) != it->in_dim || up.dim(0) != it->out_dim ||
        up.dim(1) != down.dim(0)) {
      throw AdapterError("adapter '" + name + "' has down " + shape_string(down.shape()) + " and up " +
                         shape_string(up.shape()) + ", projection is " + std::to_string(it->out_dim) + "x" +
                         std::to_string(it->in_dim));
    }
  }
}

std::vector<AttentionProjection> Denoiser::attention_projections() const {
  std::vector<AttentionProjection> out;
  for (const AttnBlock* a : {&mid_attn_, &dec_attn_[0], &dec_attn_[1]}) {
    for (const char* p : {"q", "k", "v", "o"}) {
      out.push_back({a->name + "." + p, a->dim, a->dim});
    }
  }
  return out;
}

Var Denoiser::run_res(const ResBlock& blk, const Var& x, const Var& emb) const {
  Var h = ag::silu(ag::group_norm(x, blk.n1.g, blk.n1.b, kGroupNormGroups));
  h = ag::conv2d(h, blk.c1.w, blk.c1.b);
  h = ag::add_channel_bias(h, ag::linear(emb, blk.emb.w, blk.emb.b));
  h = ag::silu(ag::group_norm(h, blk.n2.g, blk.n2.b, kGroupNormGroups));
  h = ag::conv2d(h, blk.c2.w, blk.c2.b);
  Var skip = blk.skip.w ? ag::conv2d(x, blk.skip.w, blk.skip.b) : x;
  return ag::add(h, skip);
}

Var Denoiser::project(const Dense& d, const std::string& name, const Var& tokens,
                      const AdapterMap* adapters) const {
  Var y = ag::linear(tokens, d.w, d.b);
  if (adapters) {
    auto it = adapters->find(name);
    if (it != adapters->end()) {
      Var low = ag::matmul(tokens, it->second.down, false, true);
      y = ag::add(y, ag::matmul(low, it->second.up, false, true));
    }
  }
  return y;
}

Var Denoiser::run_attn(const AttnBlock& blk, const Var& x, const ForwardOptions& opts,
                       int decoder_slot) const {
  const int h = x->value.dim(1);
  const int w = x->value.dim(2);
  Var tokens = ag::to_tokens(ag::group_norm(x, blk.n.g, blk.n.b, kGroupNormGroups));
  Var q = project(blk.q, blk.name + ".q", tokens, opts.adapters);
  Var k = project(blk.k, blk.name + ".k", tokens, opts.adapters);
  Var v = project(blk.v, blk.name + ".v", tokens, opts.adapters);
  AttentionControl* ctl = opts.attention;
  if (ctl && decoder_slot >= 0 && ((ctl->slots >> decoder_slot) & 1u)) {
    const auto slot = static_cast<std::size_t>(decoder_slot);
    if (ctl->mode == AttentionControl::Mode::record) {
      if (ctl->keys.size() <= slot) {
        ctl->keys.resize(slot + 1);
        ctl->values.resize(slot + 1);
      }
      ctl->keys[slot] = k->value;
      ctl->values[slot] = v->value;
    } else if (ctl->mode == AttentionControl::Mode::inject) {
      if (ctl->keys.size() <= slot || !ctl->keys[slot].same_shape(k->value)) {
        throw Error("attention control has no recorded keys for " + blk.name);
      }
      k = ag::constant(ctl->keys[slot]);
      v = ag::constant(ctl->values[slot]);
    }
  }
  Var scores = ag::scale(ag::matmul(q, k, false, true), 1.0f / std::sqrt(static_cast<float>(blk.dim)));
  Var attn = ag::matmul(ag::softmax_rows(scores), v);
  Var out = project(blk.o, blk.name + ".o", attn, opts.adapters);
  return ag::add(x, ag::from_tokens(out, h, w));
}

namespace {

Tensor timestep_embedding(int t, int dim) {
  Tensor e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(t * freq));
    e[static_cast<std::size_t>(i + half)] = static_cast<float>(std::cos(t * freq));
  }
  return e;
}

}  // namespace

ForwardResult Denoiser::forward(const Var& x, const ForwardOptions& opts) const {
  const Tensor& xv = x->value;
  if (xv.rank() != 3 || xv.dim(0) != config_.image_channels || xv.dim(1) % 8 != 0 ||
      xv.dim(2) % 8 != 0 || xv.dim(1) < 8 || xv.dim(2) < 8) {
    throw ShapeError("denoiser input must be [" + std::to_string(config_.image_channels) +
                     ", H, W] with H, W multiples of 8; got " + shape_string(xv.shape()));
  }
  if (opts.adapters) validate_adapters(*opts.adapters);
  if (opts.stop_after_block < 0 || opts.stop_after_block > 4) {
    throw IndexError("stop_after_block must be in [0, 4]");
  }
  Var emb = ag::linear(ag::constant(timestep_embedding(opts.train_t, emb_dim_)), t1_.w, t1_.b);
  emb = ag::linear(ag::silu(emb), t2_.w, t2_.b);
  if (config_.conditioning == Conditioning::class_label) {
    const int idx = (opts.label >= 0 && opts.label < config_.num_classes) ? opts.label
                                                                          : config_.num_classes;
    Tensor onehot({config_.num_classes + 1});
    onehot[static_cast<std::size_t>(idx)] = 1.0f;
    emb = ag::add(emb, ag::linear(ag::constant(std::move(onehot)), class_table_, nullptr));
  }
  emb = ag::silu(emb);

  ForwardResult res;
  Var h = ag::conv2d(x, stem_.w, stem_.b);
  Var s0 = run_res(enc_[0], h, emb);
  Var s1 = run_res(enc_[1], ag::avg_pool2(s0), emb);
  Var s2 = run_res(enc_[2], ag::avg_pool2(s1), emb);
  Var s3 = run_res(enc_[3], ag::avg_pool2(s2), emb);
  Var m = run_attn(mid_attn_, run_res(mid_, s3, emb), opts, -1);

  Var d = run_attn(dec_attn_[0], run_res(dec_[0], ag::concat_channels(m, s3), emb), opts, 0);
  res.features[0] = d;
  if (opts.stop_after_block == 1) return res;
  d = run_attn(dec_attn_[1],
               run_res(dec_[1], ag::concat_channels(ag::upsample_nearest2(d), s2), emb), opts, 1);
  res.features[1] = d;
  if (opts.stop_after_block == 2) return res;
  d = run_res(dec_[2], ag::concat_channels(ag::upsample_nearest2(d), s1), emb);
  res.features[2] = d;
  if (opts.stop_after_block == 3) return res;
  d = run_res(dec_[3], ag::concat_channels(ag::upsample_nearest2(d), s0), emb);
  res.features[3] = d;
  if (opts.stop_after_block == 4) return res;
  Var out = ag::silu(ag::group_norm(d, out_norm_.g, out_norm_.b, kGroupNormGroups));
  res.eps = ag::conv2d(out, out_conv_.w, out_conv_.b);
  return res;
}

}  // namespace draglab
