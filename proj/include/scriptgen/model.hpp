#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "scriptgen/autograd.hpp"
#include "scriptgen/text_pipeline.hpp"

namespace scriptgen {

struct RetrievedSet;
struct NegativeSet;
struct TrainingExample;

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int ffn_dim = 256;
  int vocab_size = 0;
  int max_positions = 1024;
  double dropout_rate = 0.0;
  /// Retrieval fusion in every decoder layer; otherwise only the top layer.
  bool fuse_every_layer = true;

  void validate() const;
};

using autograd::Matrix;
using autograd::Var;
using ParamSlot = std::size_t;

struct AttentionParams {
  ParamSlot wq, bq, wk, bk, wv, bv, wo, bo;
};

struct NormParams {
  ParamSlot gain, bias;
};

struct FeedForwardParams {
  ParamSlot w1, b1, w2, b2;
};

struct EncoderLayerParams {
  NormParams attn_norm;
  AttentionParams self_attn;
  NormParams ffn_norm;
  FeedForwardParams ffn;
};

struct DecoderLayerParams {
  NormParams self_norm;
  AttentionParams self_attn;
  NormParams cross_norm;
  AttentionParams cross_attn;
  AttentionParams retrieval_attn;  // z' = MultiHead(z, H_R, H_R)
  ParamSlot w_gamma;               // 2d x 1
  NormParams fused_norm;           // LN(z')
  NormParams ffn_norm;
  FeedForwardParams ffn;
};

/// Slot numbers of every tensor, in declaration order.
struct ModelLayout {
  ParamSlot token_embedding;  // vocab x d, tied with the output projection
  std::vector<EncoderLayerParams> encoder;
  NormParams encoder_norm;
  AttentionParams alpha_pool;
  ParamSlot w_alpha;  // 2d x 1
  AttentionParams beta_pool;
  ParamSlot w_beta;          // 2d x 1
  ParamSlot mask_embedding;  // 1 x d
  std::vector<DecoderLayerParams> decoder;
  NormParams decoder_norm;
  ParamSlot w_y;  // d x 1
  ParamSlot b_y;  // 1 x 1
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  /// Zero-initialized tensors with the layout of `config`; used when loading.
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ModelLayout& layout() const { return layout_; }
  const autograd::ParameterSet& parameters() const { return params_; }
  autograd::ParameterSet& parameters() { return params_; }
  /// Sinusoidal position table, max_positions x d.
  const Matrix& positions() const { return positions_; }

 private:
  void declare(std::mt19937_64* rng);

  ModelConfig config_;
  ModelLayout layout_{};
  autograd::ParameterSet params_;
  Matrix positions_;
};

/// Replaces a learned gate value with a constant (tests and ablations).
struct GateOverrides {
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<double> gamma;
};

struct ForwardOptions {
  GateOverrides gates;
  bool training = false;  // enables dropout
  std::uint64_t dropout_seed = 0;
};

struct EncoderOutput {
  Var hidden;      // H-bar: [h_0; gated segments], seq x d
  Var raw_hidden;  // H before gating
  Var cls;         // h_0, 1 x d
  std::vector<Var> alphas;  // one 1 x 1 gate per segment after <cls>
};

struct RetrievedEncoding {
  Var hidden;  // H-bar_R, rows = total retrieved tokens; invalid when empty
  std::vector<Var> raw;  // per retrieved step, before gating
  std::vector<Var> betas;

  bool empty() const { return !hidden.valid(); }
};

struct DecoderOutput {
  Var logits;  // target_len x vocab
  Var hidden;  // top-layer hidden states feeding the output projection
  std::vector<Var> gammas;  // per fused layer, target_len x 1
};

/// Token-level inputs for one training example.
struct ModelInput {
  SegmentedSequence source;
  std::vector<std::vector<TokenId>> retrieved;  // each starts with <template>
  std::vector<TokenId> target;                  // <bos> ... <eos>
  std::vector<std::vector<TokenId>> negatives;  // <bos> ... <eos>
};

struct InputLimits {
  std::size_t max_segment_tokens = kDefaultMaxSegmentTokens;
  std::size_t max_target_tokens = kDefaultMaxTargetTokens;
};

ModelInput prepare_input(const Tokenizer& tokenizer, const TrainingExample& example,
                         const RetrievedSet& retrieved, const NegativeSet* negatives,
                         const InputLimits& limits = {});

std::vector<std::vector<TokenId>> tokenize_retrieved(const Tokenizer& tokenizer, const RetrievedSet& retrieved,
                                                     std::size_t max_tokens = kDefaultMaxSegmentTokens);

struct LossTerms {
  Var generation;
  Var contrastive;  // invalid when lambda == 0 or no negatives
  Var total;
  EncoderOutput encoder;
  RetrievedEncoding retrieved;
  DecoderOutput decoder;
};

/// One forward computation recorded on a tape.
class ForwardPass {
 public:
  ForwardPass(const Model& model, autograd::Tape& tape, ForwardOptions options = {});

  autograd::Tape& tape() { return tape_; }
  Var param(ParamSlot slot);

  /// Shared encoder stack over raw token ids (no gating).
  Var encode_tokens(const std::vector<TokenId>& ids);
  /// Encoder plus the per-segment alpha gate blending toward emb_[MASK].
  EncoderOutput encode_selective(const SegmentedSequence& seq);
  /// Each retrieved step encoded separately, beta-gated against h_0.
  RetrievedEncoding encode_retrieved(Var cls, const std::vector<std::vector<TokenId>>& steps);
  /// Teacher-forced decoder over input ids (starting with <bos>).
  DecoderOutput decode(const std::vector<TokenId>& input_ids, const EncoderOutput& enc,
                       const RetrievedEncoding& retrieved);

  /// Mean NLL of the shifted gold tokens, <pad> excluded. `target` is the full
  /// <bos> ... <eos> sequence; logits cover target[0 .. n-2].
  Var generation_loss(Var logits, const std::vector<TokenId>& target);
  /// y = sigmoid(mean_rows(H W_y + b_y)).
  Var contrastive_score(Var hidden);
  Var contrastive_loss(Var positive_hidden, const std::vector<Var>& negative_hiddens, double tau);

  /// L = L_gen + lambda * L_cl. Contrastive terms are skipped when lambda is
  /// zero or the input carries no negatives.
  LossTerms total_loss(const ModelInput& input, double lambda, double tau);

  Var multi_head(Var query, Var key_value, const AttentionParams& p, bool causal);

 private:
  Var embed(const std::vector<TokenId>& ids);
  Var norm(Var x, const NormParams& p);
  Var feed_forward(Var x, const FeedForwardParams& p);
  Var dropout(Var x);
  Var gate_value(Var logit_input, ParamSlot weight, const std::optional<double>& forced);

  const Model& model_;
  autograd::Tape& tape_;
  ForwardOptions options_;
  std::mt19937_64 rng_;
};

/// Decoder input ids: target without its final token.
std::vector<TokenId> decoder_input(const std::vector<TokenId>& target);

/// Scalar mean NLL for plain logits; shares the tape implementation.
double generation_loss_value(const Matrix& logits, const std::vector<TokenId>& gold);
/// Closed-form InfoNCE on scalar scores, positive first.
double contrastive_loss_value(double positive, const std::vector<double>& negatives, double tau);

struct Checkpoint {
  Model model;
  Tokenizer tokenizer;
  std::uint64_t step = 0;
};

/// Binary: magic, version, config, vocabulary, then every tensor in
/// declaration order as float64. A text manifest is written beside it.
void save_checkpoint(const std::string& path, const Model& model, const Tokenizer& tokenizer,
                     std::uint64_t step);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace scriptgen
