#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "draglab/autograd.hpp"

namespace draglab {

enum class Conditioning { none, class_label };

struct DenoiserConfig {
  int base_channels = 16;
  int decoder_blocks = 4;
  Conditioning conditioning = Conditioning::class_label;
  int num_classes = 3;
  int image_channels = 3;
  std::uint64_t parameter_seed = 0;

  void validate() const;
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

/// Low-rank delta for one projection: W + up * down.
struct ProjectionAdapter {
  ag::Var down;  // [rank, in]
  ag::Var up;    // [out, rank]
};
/// Keyed by projection name, e.g. "dec1.attn.q".
using AdapterMap = std::map<std::string, ProjectionAdapter>;

/// Key/value substitution in decoder self-attention layers. A reconstruction
/// branch runs with `record`; the edit branch at the same step runs with
/// `inject` and reuses the recorded keys/values.
struct AttentionControl {
  enum class Mode { off, record, inject };
  Mode mode = Mode::off;
  /// Bit i selects decoder self-attention slot i (block i + 1).
  unsigned slots = 0x3;
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};

struct ForwardOptions {
  int train_t = 0;
  int label = -1;  // -1 = unconditional
  const AdapterMap* adapters = nullptr;
  /// 0 runs the full network; k in [1, 4] stops after decoder block k.
  int stop_after_block = 0;
  AttentionControl* attention = nullptr;
};

struct ForwardResult {
  ag::Var eps;                       // null when stopped early
  std::array<ag::Var, 4> features;   // decoder block outputs, index 0 = block 1
};

struct AttentionProjection {
  std::string name;
  int in_dim;
  int out_dim;
};

/// Small pixel-space UNet noise predictor.
///
/// Encoder at R, R/2, R/4, R/8 with channel multipliers 1,2,3,4; a mid block
/// with self-attention; four decoder blocks from coarse (block 1, R/8) to
/// fine (block 4, R). Decoder blocks 1 and 2 carry self-attention. The output
/// convolution, the second conv of each residual block and the attention
/// output projections are zero-initialised, so a fresh model predicts
/// exactly zero noise.
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig config);

  const DenoiserConfig& config() const { return config_; }
  ForwardResult forward(const ag::Var& x, const ForwardOptions& opts) const;

  const std::vector<std::pair<std::string, ag::Var>>& params() const { return params_; }
  std::size_t parameter_count() const;
  /// Deep copy with independent parameter storage.
  Denoiser clone() const;
  void set_trainable(bool trainable);
  void zero_grad();

  /// Every self-attention projection (LoRA targets).
  std::vector<AttentionProjection> attention_projections() const;
  /// Throws AdapterError unless every adapter matches a projection's shape.
  void validate_adapters(const AdapterMap& adapters) const;

 private:
  struct Conv {
    ag::Var w, b;
  };
  struct Norm {
    ag::Var g, b;
  };
  struct Dense {
    ag::Var w, b;
  };
  struct ResBlock {
    Norm n1;
    Conv c1;
    Dense emb;
    Norm n2;
    Conv c2;
    Conv skip;  // empty when cin == cout
  };
  struct AttnBlock {
    std::string name;
    int dim = 0;
    Norm n;
    Dense q, k, v, o;
  };

  ag::Var add_param(const std::string& name, Tensor value);
  Conv make_conv(const std::string& name, int cin, int cout, int k, bool zero);
  Norm make_norm(const std::string& name, int c);
  Dense make_dense(const std::string& name, int in, int out, bool zero);
  ResBlock make_res(const std::string& name, int cin, int cout);
  AttnBlock make_attn(const std::string& name, int dim);

  ag::Var run_res(const ResBlock& blk, const ag::Var& x, const ag::Var& emb) const;
  ag::Var run_attn(const AttnBlock& blk, const ag::Var& x, const ForwardOptions& opts,
                   int decoder_slot) const;
  ag::Var project(const Dense& d, const std::string& name, const ag::Var& tokens,
                  const AdapterMap* adapters) const;

  DenoiserConfig config_;
  std::vector<std::pair<std::string, ag::Var>> params_;
  std::uint64_t init_counter_ = 0;

  int emb_dim_ = 0;
  Dense t1_, t2_;
  ag::Var class_table_;
  Conv stem_;
  std::array<ResBlock, 4> enc_;
  ResBlock mid_;
  AttnBlock mid_attn_;
  std::array<ResBlock, 4> dec_;
  std::array<AttnBlock, 2> dec_attn_;
  Norm out_norm_;
  Conv out_conv_;
};

inline constexpr int kGroupNormGroups = 8;

}  // namespace draglab
