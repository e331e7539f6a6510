#include "scriptgen/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "scriptgen/corpus.hpp"
#include "scriptgen/retrieval.hpp"

namespace scriptgen {

using autograd::Tape;

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'G', 'C', 'K', 'P', 'T', 0, 0};
constexpr std::uint32_t kCheckpointVersion = 1;

Matrix xavier(std::mt19937_64* rng, Eigen::Index rows, Eigen::Index cols) {
  if (!rng) return Matrix::Zero(rows, cols);
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = dist(*rng);
  }
  return m;
}

Matrix sinusoidal_positions(int max_positions, int d_model) {
  Matrix p(max_positions, d_model);
  for (int pos = 0; pos < max_positions; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d_model);
      p(pos, i) = std::sin(angle);
      if (i + 1 < d_model) p(pos, i + 1) = std::cos(angle);
    }
  }
  return p;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return s;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("d_model must be a positive multiple of n_heads");
  }
  if (n_enc_layers < 1 || n_dec_layers < 1 || ffn_dim < 1) {
    throw std::invalid_argument("layer counts and ffn_dim must be positive");
  }
  if (vocab_size <= Tokenizer::kSpecialCount - 1) throw std::invalid_argument("vocab_size too small");
  if (max_positions < 2) throw std::invalid_argument("max_positions must be at least 2");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::invalid_argument("dropout_rate must lie in [0, 1)");
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  declare(&rng);
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  declare(nullptr);
}

void Model::declare(std::mt19937_64* rng) {
  const Eigen::Index d = config_.d_model;
  const Eigen::Index f = config_.ffn_dim;
  auto tensor = [&](const std::string& name, Matrix m) { return params_.add(name, std::move(m)); };
  auto weight = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    return tensor(name, xavier(rng, r, c));
  };
  auto zeros = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    return tensor(name, Matrix::Zero(r, c));
  };
  auto norm = [&](const std::string& name) {
    return NormParams{tensor(name + ".gain", rng ? Matrix::Ones(1, d) : Matrix::Zero(1, d)),
                      zeros(name + ".bias", 1, d)};
  };
  auto attention = [&](const std::string& name) {
    AttentionParams p{};
    p.wq = weight(name + ".wq", d, d);
    p.bq = zeros(name + ".bq", 1, d);
    p.wk = weight(name + ".wk", d, d);
    p.bk = zeros(name + ".bk", 1, d);
    p.wv = weight(name + ".wv", d, d);
    p.bv = zeros(name + ".bv", 1, d);
    p.wo = weight(name + ".wo", d, d);
    p.bo = zeros(name + ".bo", 1, d);
    return p;
  };
  auto ffn = [&](const std::string& name) {
    return FeedForwardParams{weight(name + ".w1", d, f), zeros(name + ".b1", 1, f), weight(name + ".w2", f, d),
                             zeros(name + ".b2", 1, d)};
  };

  layout_.token_embedding = weight("token_embedding", config_.vocab_size, d);
  for (int l = 0; l < config_.n_enc_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderLayerParams layer{};
    layer.attn_norm = norm(p + ".attn_norm");
    layer.self_attn = attention(p + ".self_attn");
    layer.ffn_norm = norm(p + ".ffn_norm");
    layer.ffn = ffn(p + ".ffn");
    layout_.encoder.push_back(layer);
  }
  layout_.encoder_norm = norm("encoder.final_norm");
  layout_.alpha_pool = attention("alpha_pool");
  layout_.w_alpha = weight("w_alpha", 2 * d, 1);
  layout_.beta_pool = attention("beta_pool");
  layout_.w_beta = weight("w_beta", 2 * d, 1);
  layout_.mask_embedding = weight("mask_embedding", 1, d);
  for (int l = 0; l < config_.n_dec_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayerParams layer{};
    layer.self_norm = norm(p + ".self_norm");
    layer.self_attn = attention(p + ".self_attn");
    layer.cross_norm = norm(p + ".cross_norm");
    layer.cross_attn = attention(p + ".cross_attn");
    layer.retrieval_attn = attention(p + ".retrieval_attn");
    layer.w_gamma = weight(p + ".w_gamma", 2 * d, 1);
    layer.fused_norm = norm(p + ".fused_norm");
    layer.ffn_norm = norm(p + ".ffn_norm");
    layer.ffn = ffn(p + ".ffn");
    layout_.decoder.push_back(layer);
  }
  layout_.decoder_norm = norm("decoder.final_norm");
  layout_.w_y = weight("w_y", d, 1);
  layout_.b_y = zeros("b_y", 1, 1);
  positions_ = sinusoidal_positions(config_.max_positions, config_.d_model);
}

ForwardPass::ForwardPass(const Model& model, Tape& tape, ForwardOptions options)
    : model_(model), tape_(tape), options_(options), rng_(options.dropout_seed) {}

Var ForwardPass::param(ParamSlot slot) { return tape_.parameter(model_.parameters(), slot); }

Var ForwardPass::embed(const std::vector<TokenId>& ids) {
  if (ids.empty()) throw std::invalid_argument("cannot embed an empty sequence");
  if (static_cast<int>(ids.size()) > model_.config().max_positions) {
    throw std::invalid_argument("sequence of " + std::to_string(ids.size()) + " tokens exceeds max_positions");
  }
  for (auto id : ids) {
    if (id < 0 || id >= model_.config().vocab_size) throw std::invalid_argument("token id outside the vocabulary");
  }
  const Var tokens = tape_.scale(tape_.gather_rows(param(model_.layout().token_embedding), ids),
                                 std::sqrt(static_cast<double>(model_.config().d_model)));
  const Var pos = tape_.constant(model_.positions().topRows(static_cast<Eigen::Index>(ids.size())));
  return tape_.add(tokens, pos);
}

Var ForwardPass::norm(Var x, const NormParams& p) { return tape_.layer_norm(x, param(p.gain), param(p.bias)); }

Var ForwardPass::feed_forward(Var x, const FeedForwardParams& p) {
  const Var h = tape_.gelu(tape_.add_row(tape_.matmul(x, param(p.w1)), param(p.b1)));
  return tape_.add_row(tape_.matmul(h, param(p.w2)), param(p.b2));
}

Var ForwardPass::dropout(Var x) {
  const double rate = model_.config().dropout_rate;
  if (!options_.training || rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(tape_.rows(x), tape_.cols(x));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng_) ? 1.0 / (1.0 - rate) : 0.0;
  return tape_.mul_constant(x, std::move(mask));
}

Var ForwardPass::multi_head(Var query, Var key_value, const AttentionParams& p, bool causal) {
  const int heads = model_.config().n_heads;
  const Eigen::Index dh = model_.config().d_model / heads;
  const Var q = tape_.add_row(tape_.matmul(query, param(p.wq)), param(p.bq));
  const Var k = tape_.add_row(tape_.matmul(key_value, param(p.wk)), param(p.bk));
  const Var v = tape_.add_row(tape_.matmul(key_value, param(p.wv)), param(p.bv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Var qh = heads == 1 ? q : tape_.slice_cols(q, h * dh, dh);
    const Var kh = heads == 1 ? k : tape_.slice_cols(k, h * dh, dh);
    const Var vh = heads == 1 ? v : tape_.slice_cols(v, h * dh, dh);
    const Var weights = tape_.softmax_rows(tape_.scale(tape_.matmul_nt(qh, kh), scale), causal);
    outs.push_back(tape_.matmul(weights, vh));
  }
  const Var merged = heads == 1 ? outs.front() : tape_.concat_cols(outs);
  return tape_.add_row(tape_.matmul(merged, param(p.wo)), param(p.bo));
}

Var ForwardPass::encode_tokens(const std::vector<TokenId>& ids) {
  Var x = embed(ids);
  for (const auto& layer : model_.layout().encoder) {
    const Var h = norm(x, layer.attn_norm);
    x = tape_.add(x, dropout(multi_head(h, h, layer.self_attn, false)));
    x = tape_.add(x, dropout(feed_forward(norm(x, layer.ffn_norm), layer.ffn)));
  }
  return norm(x, model_.layout().encoder_norm);
}

Var ForwardPass::gate_value(Var logit_input, ParamSlot weight, const std::optional<double>& forced) {
  if (forced) return tape_.constant(Matrix::Constant(tape_.rows(logit_input), 1, *forced));
  return tape_.sigmoid(tape_.matmul(logit_input, param(weight)));
}

EncoderOutput ForwardPass::encode_selective(const SegmentedSequence& seq) {
  if (seq.segments.empty() || seq.segments.front().label != SegmentLabel::Cls || seq.segments.front().size() != 1) {
    throw std::invalid_argument("sequence must start with a single <cls> segment");
  }
  for (const auto& s : seq.segments) {
    if (s.size() == 0) throw std::invalid_argument("cannot attend over an empty segment");
  }
  EncoderOutput out;
  out.raw_hidden = encode_tokens(seq.token_ids);
  out.cls = tape_.slice_rows(out.raw_hidden, 0, 1);
  const Var mask = param(model_.layout().mask_embedding);
  std::vector<Var> rows{out.cls};
  for (std::size_t j = 1; j < seq.segments.size(); ++j) {
    const auto& s = seq.segments[j];
    const Var block = tape_.slice_rows(out.raw_hidden, static_cast<Eigen::Index>(s.start),
                                       static_cast<Eigen::Index>(s.size()));
    const Var pooled = multi_head(out.cls, block, model_.layout().alpha_pool, false);
    const Var alpha = gate_value(tape_.concat_cols({out.cls, pooled}), model_.layout().w_alpha, options_.gates.alpha);
    out.alphas.push_back(alpha);
    rows.push_back(tape_.blend(alpha, mask, block));
  }
  out.hidden = tape_.concat_rows(rows);
  return out;
}

RetrievedEncoding ForwardPass::encode_retrieved(Var cls, const std::vector<std::vector<TokenId>>& steps) {
  RetrievedEncoding out;
  if (steps.empty()) return out;
  const Var mask = param(model_.layout().mask_embedding);
  std::vector<Var> blocks;
  for (const auto& ids : steps) {
    const Var h = encode_tokens(ids);
    const Var pooled = multi_head(cls, h, model_.layout().beta_pool, false);
    const Var beta = gate_value(tape_.concat_cols({cls, pooled}), model_.layout().w_beta, options_.gates.beta);
    out.raw.push_back(h);
    out.betas.push_back(beta);
    blocks.push_back(tape_.blend(beta, mask, h));
  }
  out.hidden = blocks.size() == 1 ? blocks.front() : tape_.concat_rows(blocks);
  return out;
}

DecoderOutput ForwardPass::decode(const std::vector<TokenId>& input_ids, const EncoderOutput& enc,
                                  const RetrievedEncoding& retrieved) {
  if (input_ids.empty() || input_ids.front() != token_id(SpecialToken::Bos)) {
    throw std::invalid_argument("decoder input must begin with <bos>");
  }
  DecoderOutput out;
  Var z = embed(input_ids);
  const auto& layers = model_.layout().decoder;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const Var hs = norm(z, layer.self_norm);
    z = tape_.add(z, dropout(multi_head(hs, hs, layer.self_attn, true)));
    z = tape_.add(z, dropout(multi_head(norm(z, layer.cross_norm), enc.hidden, layer.cross_attn, false)));
    const bool fuse = model_.config().fuse_every_layer || l + 1 == layers.size();
    if (fuse && !retrieved.empty()) {
      const Var fused = multi_head(z, retrieved.hidden, layer.retrieval_attn, false);
      const Var gamma = gate_value(tape_.concat_cols({z, fused}), layer.w_gamma, options_.gates.gamma);
      out.gammas.push_back(gamma);
      z = tape_.row_blend(gamma, norm(fused, layer.fused_norm), z);
    }
    z = tape_.add(z, dropout(feed_forward(norm(z, layer.ffn_norm), layer.ffn)));
  }
  out.hidden = norm(z, model_.layout().decoder_norm);
  out.logits = tape_.matmul_nt(out.hidden, param(model_.layout().token_embedding));
  return out;
}

Var ForwardPass::generation_loss(Var logits, const std::vector<TokenId>& target) {
  if (target.size() < 2) throw std::invalid_argument("target needs at least <bos> and one gold token");
  const std::vector<TokenId> gold(target.begin() + 1, target.end());
  return tape_.cross_entropy(logits, gold, token_id(SpecialToken::Pad));
}

Var ForwardPass::contrastive_score(Var hidden) {
  const Var proj = tape_.add_row(tape_.matmul(hidden, param(model_.layout().w_y)), param(model_.layout().b_y));
  return tape_.sigmoid(tape_.mean_rows(proj));
}

Var ForwardPass::contrastive_loss(Var positive_hidden, const std::vector<Var>& negative_hiddens, double tau) {
  if (negative_hiddens.empty()) throw std::invalid_argument("contrastive loss needs at least one negative");
  std::vector<Var> scores{contrastive_score(positive_hidden)};
  for (auto h : negative_hiddens) scores.push_back(contrastive_score(h));
  return tape_.info_nce(tape_.concat_cols(scores), tau);
}

LossTerms ForwardPass::total_loss(const ModelInput& input, double lambda, double tau) {
  LossTerms out;
  out.encoder = encode_selective(input.source);
  out.retrieved = encode_retrieved(out.encoder.cls, input.retrieved);
  out.decoder = decode(decoder_input(input.target), out.encoder, out.retrieved);
  out.generation = generation_loss(out.decoder.logits, input.target);
  out.total = out.generation;
  if (lambda != 0.0 && !input.negatives.empty()) {
    std::vector<Var> negatives;
    for (const auto& neg : input.negatives) {
      negatives.push_back(decode(decoder_input(neg), out.encoder, out.retrieved).hidden);
    }
    out.contrastive = contrastive_loss(out.decoder.hidden, negatives, tau);
    out.total = tape_.add(out.generation, tape_.scale(out.contrastive, lambda));
  }
  return out;
}

std::vector<TokenId> decoder_input(const std::vector<TokenId>& target) {
  if (target.size() < 2) throw std::invalid_argument("target needs at least two tokens");
  return {target.begin(), target.end() - 1};
}

std::vector<std::vector<TokenId>> tokenize_retrieved(const Tokenizer& tokenizer, const RetrievedSet& retrieved,
                                                     std::size_t max_tokens) {
  std::vector<std::vector<TokenId>> out;
  for (const auto& step : retrieved.steps) out.push_back(encode_retrieved_step(tokenizer, step, max_tokens));
  return out;
}

ModelInput prepare_input(const Tokenizer& tokenizer, const TrainingExample& example, const RetrievedSet& retrieved,
                         const NegativeSet* negatives, const InputLimits& limits) {
  ModelInput in;
  in.source = assemble_input(tokenizer, example, limits.max_segment_tokens);
  in.retrieved = tokenize_retrieved(tokenizer, retrieved, limits.max_segment_tokens);
  in.target = encode_target(tokenizer, example.target, limits.max_target_tokens);
  if (negatives) {
    for (const auto* pool : {&negatives->self_negatives, &negatives->retrieved_negatives}) {
      for (const auto& text : *pool) in.negatives.push_back(encode_target(tokenizer, text, limits.max_target_tokens));
    }
  }
  return in;
}

double generation_loss_value(const Matrix& logits, const std::vector<TokenId>& gold) {
  Tape tape;
  return tape.scalar_value(tape.cross_entropy(tape.constant(logits), gold, token_id(SpecialToken::Pad)));
}

double contrastive_loss_value(double positive, const std::vector<double>& negatives, double tau) {
  if (negatives.empty()) throw std::invalid_argument("contrastive loss needs at least one negative");
  Matrix scores(1, static_cast<Eigen::Index>(negatives.size() + 1));
  scores(0, 0) = positive;
  for (std::size_t i = 0; i < negatives.size(); ++i) scores(0, static_cast<Eigen::Index>(i + 1)) = negatives[i];
  Tape tape;
  return tape.scalar_value(tape.info_nce(tape.constant(scores), tau));
}

void save_checkpoint(const std::string& path, const Model& model, const Tokenizer& tokenizer, std::uint64_t step) {
  const auto& c = model.config();
  if (static_cast<std::size_t>(c.vocab_size) != tokenizer.size()) {
    throw std::invalid_argument("model vocabulary size does not match the tokenizer");
  }
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_pod(out, kCheckpointVersion);
    for (int v : {c.d_model, c.n_heads, c.n_enc_layers, c.n_dec_layers, c.ffn_dim, c.vocab_size, c.max_positions}) {
      write_pod(out, static_cast<std::int32_t>(v));
    }
    write_pod(out, c.dropout_rate);
    write_pod(out, static_cast<std::uint8_t>(c.fuse_every_layer ? 1 : 0));
    write_pod(out, step);
    write_pod(out, static_cast<std::uint32_t>(tokenizer.size()));
    for (const auto& t : tokenizer.tokens()) write_string(out, t);
    const auto& params = model.parameters();
    write_pod(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& m = params.value(i);
      write_string(out, params.name(i));
      write_pod(out, static_cast<std::uint32_t>(m.rows()));
      write_pod(out, static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index col = 0; col < m.cols(); ++col) write_pod(out, m(r, col));
      }
    }
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
  }
  std::ofstream manifest(path + ".manifest", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write checkpoint manifest: " + path + ".manifest");
  std::ostringstream hash;
  hash << std::hex << std::setw(16) << std::setfill('0') << tokenizer.fingerprint();
  manifest << "format_version\t" << kCheckpointVersion << '\n'
           << "d_model\t" << c.d_model << '\n'
           << "n_heads\t" << c.n_heads << '\n'
           << "n_enc_layers\t" << c.n_enc_layers << '\n'
           << "n_dec_layers\t" << c.n_dec_layers << '\n'
           << "ffn_dim\t" << c.ffn_dim << '\n'
           << "vocab_size\t" << c.vocab_size << '\n'
           << "max_positions\t" << c.max_positions << '\n'
           << "dropout_rate\t" << c.dropout_rate << '\n'
           << "fuse_every_layer\t" << (c.fuse_every_layer ? "true" : "false") << '\n'
           << "vocab_hash\t" << hash.str() << '\n'
           << "parameter_count\t" << model.parameters().scalar_count() << '\n'
           << "training_steps\t" << step << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.d_model = read_pod<std::int32_t>(in);
  c.n_heads = read_pod<std::int32_t>(in);
  c.n_enc_layers = read_pod<std::int32_t>(in);
  c.n_dec_layers = read_pod<std::int32_t>(in);
  c.ffn_dim = read_pod<std::int32_t>(in);
  c.vocab_size = read_pod<std::int32_t>(in);
  c.max_positions = read_pod<std::int32_t>(in);
  c.dropout_rate = read_pod<double>(in);
  c.fuse_every_layer = read_pod<std::uint8_t>(in) != 0;
  const auto step = read_pod<std::uint64_t>(in);
  const auto vocab = read_pod<std::uint32_t>(in);
  std::vector<std::string> tokens;
  for (std::uint32_t i = 0; i < vocab; ++i) tokens.push_back(read_string(in));
  if (tokens.size() < static_cast<std::size_t>(Tokenizer::kSpecialCount)) {
    throw std::runtime_error("checkpoint vocabulary is missing special tokens");
  }
  for (std::size_t i = 0; i < kSpecialTokenNames.size(); ++i) {
    if (tokens[i] != kSpecialTokenNames[i]) throw std::runtime_error("checkpoint vocabulary has a corrupt header");
  }
  Tokenizer tokenizer(std::vector<std::string>(tokens.begin() + Tokenizer::kSpecialCount, tokens.end()));
  if (static_cast<std::size_t>(c.vocab_size) != tokenizer.size()) {
    throw std::runtime_error("checkpoint config does not match its vocabulary");
  }
  Model model(c);
  auto& params = model.parameters();
  const auto count = read_pod<std::uint32_t>(in);
  if (count != params.size()) throw std::runtime_error("checkpoint tensor count does not match its config");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = read_string(in);
    if (name != params.name(i)) throw std::runtime_error("checkpoint tensor " + name + " out of order");
    const auto rows = read_pod<std::uint32_t>(in);
    const auto cols = read_pod<std::uint32_t>(in);
    Matrix& m = params.value(i);
    if (rows != m.rows() || cols != m.cols()) throw std::runtime_error("checkpoint tensor " + name + " has the wrong shape");
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index col = 0; col < m.cols(); ++col) m(r, col) = read_pod<double>(in);
    }
  }
  return Checkpoint{std::move(model), std::move(tokenizer), step};
}

}  // namespace scriptgen
