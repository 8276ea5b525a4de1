#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "storyhead/config.hpp"
#include "storyhead/params.hpp"
#include "storyhead/tensor.hpp"
#include "storyhead/tokenizer.hpp"

namespace storyhead {

// ---- parameter layout ----
//
// embed/token                      [vocab, d_H]   shared by encoder input,
//                                                 decoder input and the
//                                                 output projection (Eq-style
//                                                 weight tying)
// encoder/pos, decoder/pos         [max_positions, d_H]
// encoder/layer{l}/attn|ln1|ffn|ln2
// decoder/layer{l}/self|ln1|cross|ln2|ffn|ln3

namespace detail {

inline void add_attention_params(ParameterStore& p, const std::string& prefix, const ModelConfig& c, Rng& rng) {
  const int d = c.hidden_dim, proj = c.projection_dim();
  p.create(prefix + "/wq", {d, proj}, rng);
  p.create_zeros(prefix + "/bq", {proj});
  p.create(prefix + "/wk", {d, proj}, rng);
  p.create_zeros(prefix + "/bk", {proj});
  p.create(prefix + "/wv", {d, proj}, rng);
  p.create_zeros(prefix + "/bv", {proj});
  p.create(prefix + "/wo", {proj, d}, rng);
  p.create_zeros(prefix + "/bo", {d});
}

inline void add_layer_norm_params(ParameterStore& p, const std::string& prefix, const ModelConfig& c) {
  p.create_ones(prefix + "/gain", {c.hidden_dim});
  p.create_zeros(prefix + "/bias", {c.hidden_dim});
}

inline void add_ffn_params(ParameterStore& p, const std::string& prefix, const ModelConfig& c, Rng& rng) {
  p.create(prefix + "/w1", {c.hidden_dim, c.ffn_dim}, rng);
  p.create_zeros(prefix + "/b1", {c.ffn_dim});
  p.create(prefix + "/w2", {c.ffn_dim, c.hidden_dim}, rng);
  p.create_zeros(prefix + "/b2", {c.hidden_dim});
}

}  // namespace detail

// Fresh encoder-decoder parameters: truncated-normal(0.02) weights, zero
// biases, unit layer-norm gains. Creation order is fixed so a seed pins
// every value.
inline void init_encoder_decoder_params(ParameterStore& p, const ModelConfig& c, Rng& rng) {
  c.validate();
  p.create("embed/token", {c.vocab_size, c.hidden_dim}, rng);
  p.create("encoder/pos", {c.max_positions, c.hidden_dim}, rng);
  p.create("decoder/pos", {c.max_positions, c.hidden_dim}, rng);
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string enc = "encoder/layer" + std::to_string(l);
    detail::add_attention_params(p, enc + "/attn", c, rng);
    detail::add_layer_norm_params(p, enc + "/ln1", c);
    detail::add_ffn_params(p, enc + "/ffn", c, rng);
    detail::add_layer_norm_params(p, enc + "/ln2", c);
  }
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string dec = "decoder/layer" + std::to_string(l);
    detail::add_attention_params(p, dec + "/self", c, rng);
    detail::add_layer_norm_params(p, dec + "/ln1", c);
    detail::add_attention_params(p, dec + "/cross", c, rng);
    detail::add_layer_norm_params(p, dec + "/ln2", c);
    detail::add_ffn_params(p, dec + "/ffn", c, rng);
    detail::add_layer_norm_params(p, dec + "/ln3", c);
  }
}

// Closed-form parameter count of the encoder-decoder block above.
inline long long expected_parameter_count(const ModelConfig& c) {
  const long long d = c.hidden_dim, proj = c.projection_dim(), f = c.ffn_dim;
  const long long attn = 3 * (d * proj + proj) + (proj * d + d);
  const long long ln = 2 * d;
  const long long ffn = d * f + f + f * d + d;
  const long long enc_layer = attn + 2 * ln + ffn;
  const long long dec_layer = 2 * attn + 3 * ln + ffn;
  return static_cast<long long>(c.vocab_size) * d + 2LL * c.max_positions * d +
         c.num_layers * (enc_layer + dec_layer);
}

namespace detail {

inline Tensor multi_head_attention(Tape& tape, const ParameterStore& p, const std::string& prefix,
                                   const Tensor& q_in, const Tensor& kv_in, const ModelConfig& c, bool causal) {
  const int dv = c.value_dim;
  Tensor q = tape.add_bias(tape.matmul(q_in, p.get(prefix + "/wq")), p.get(prefix + "/bq"));
  Tensor k = tape.add_bias(tape.matmul(kv_in, p.get(prefix + "/wk")), p.get(prefix + "/bk"));
  Tensor v = tape.add_bias(tape.matmul(kv_in, p.get(prefix + "/wv")), p.get(prefix + "/bv"));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(c.num_heads));
  for (int h = 0; h < c.num_heads; ++h) {
    Tensor qh = tape.slice_cols(q, h * dv, dv);
    Tensor kh = tape.slice_cols(k, h * dv, dv);
    Tensor vh = tape.slice_cols(v, h * dv, dv);
    Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dv)));
    if (causal) scores = tape.causal_mask(scores);
    heads.push_back(tape.matmul(tape.softmax(scores, 1), vh));
  }
  Tensor merged = tape.concat(heads, 1);
  return tape.add_bias(tape.matmul(merged, p.get(prefix + "/wo")), p.get(prefix + "/bo"));
}

inline Tensor feed_forward(Tape& tape, const ParameterStore& p, const std::string& prefix, const Tensor& x,
                           const ModelConfig& c) {
  Tensor inner = tape.add_bias(tape.matmul(x, p.get(prefix + "/w1")), p.get(prefix + "/b1"));
  inner = c.activation == Activation::relu ? tape.relu(inner) : tape.gelu(inner);
  return tape.add_bias(tape.matmul(inner, p.get(prefix + "/w2")), p.get(prefix + "/b2"));
}

inline Tensor layer_norm_named(Tape& tape, const ParameterStore& p, const std::string& prefix, const Tensor& x) {
  return tape.layer_norm(x, p.get(prefix + "/gain"), p.get(prefix + "/bias"));
}

}  // namespace detail

// Encodes one article's tokens into per-token hidden states [len, d_H].
inline Tensor encode(Tape& tape, const std::vector<int>& ids, const ParameterStore& p, const ModelConfig& c) {
  if (static_cast<int>(ids.size()) > c.max_article_tokens) {
    throw DataError("encode: input of " + std::to_string(ids.size()) + " tokens exceeds max_article_tokens " +
                    std::to_string(c.max_article_tokens));
  }
  if (ids.empty()) return Tensor::zeros({0, c.hidden_dim});
  Tensor x = tape.add(tape.embedding(p.get("embed/token"), ids),
                      tape.slice_rows(p.get("encoder/pos"), 0, static_cast<int>(ids.size())));
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string prefix = "encoder/layer" + std::to_string(l);
    Tensor attn = detail::multi_head_attention(tape, p, prefix + "/attn", x, x, c, /*causal=*/false);
    x = detail::layer_norm_named(tape, p, prefix + "/ln1", tape.add(x, attn));
    Tensor ffn = detail::feed_forward(tape, p, prefix + "/ffn", x, c);
    x = detail::layer_norm_named(tape, p, prefix + "/ln2", tape.add(x, ffn));
  }
  return x;
}

// Causally masked decoder pass over the whole prefix; returns the hidden
// vector of every prefix position, [len, d_H].
inline Tensor decode_all(Tape& tape, const Tensor& encoder_states, const std::vector<int>& prefix,
                         const ParameterStore& p, const ModelConfig& c) {
  if (prefix.empty()) throw DataError("decode: empty prefix");
  if (prefix[0] != Vocabulary::kBosId) throw DataError("decode: prefix must begin with BOS");
  if (static_cast<int>(prefix.size()) > c.max_positions) {
    throw DataError("decode: prefix of " + std::to_string(prefix.size()) + " tokens exceeds max_positions " +
                    std::to_string(c.max_positions));
  }
  Tensor x = tape.add(tape.embedding(p.get("embed/token"), prefix),
                      tape.slice_rows(p.get("decoder/pos"), 0, static_cast<int>(prefix.size())));
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string pre = "decoder/layer" + std::to_string(l);
    Tensor self = detail::multi_head_attention(tape, p, pre + "/self", x, x, c, /*causal=*/true);
    x = detail::layer_norm_named(tape, p, pre + "/ln1", tape.add(x, self));
    Tensor cross = detail::multi_head_attention(tape, p, pre + "/cross", x, encoder_states, c, /*causal=*/false);
    x = detail::layer_norm_named(tape, p, pre + "/ln2", tape.add(x, cross));
    Tensor ffn = detail::feed_forward(tape, p, pre + "/ffn", x, c);
    x = detail::layer_norm_named(tape, p, pre + "/ln3", tape.add(x, ffn));
  }
  return x;
}

// Hidden vector of the last prefix position, [d_H].
inline Tensor decode_step(Tape& tape, const Tensor& encoder_states, const std::vector<int>& prefix,
                          const ParameterStore& p, const ModelConfig& c) {
  Tensor all = decode_all(tape, encoder_states, prefix, p, c);
  return tape.row(all, all.dim(0) - 1);
}

// Copies every decoder parameter with an encoder counterpart, bitwise:
// self attention <- encoder attention, ln1 <- ln1, ln3 <- ln2 (the FFN
// norm), ffn <- ffn, positions <- positions. Token embeddings are a single
// shared tensor. Cross attention and its norm keep their fresh values.
inline void init_decoder_from_encoder(ParameterStore& p, const ModelConfig& c) {
  static const char* kAttnParts[] = {"/wq", "/bq", "/wk", "/bk", "/wv", "/bv", "/wo", "/bo"};
  static const char* kLnParts[] = {"/gain", "/bias"};
  static const char* kFfnParts[] = {"/w1", "/b1", "/w2", "/b2"};
  p.copy_values("encoder/pos", "decoder/pos");
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string enc = "encoder/layer" + std::to_string(l);
    const std::string dec = "decoder/layer" + std::to_string(l);
    for (const char* part : kAttnParts) p.copy_values(enc + "/attn" + part, dec + "/self" + part);
    for (const char* part : kLnParts) p.copy_values(enc + "/ln1" + part, dec + "/ln1" + part);
    for (const char* part : kLnParts) p.copy_values(enc + "/ln2" + part, dec + "/ln3" + part);
    for (const char* part : kFfnParts) p.copy_values(enc + "/ffn" + part, dec + "/ffn" + part);
  }
}

// Toy masked-LM warmup over raw sentences: random positions are replaced
// with UNK and predicted from the encoder states through the shared
// embedding. Updates flow only into encoder and embedding parameters.
// Returns the per-step loss trace.
inline std::vector<double> mlm_warmup(const std::vector<std::string>& sentences, const Vocabulary& vocab,
                                      ParameterStore& params, const ModelConfig& c, int steps, double mask_rate,
                                      std::uint64_t seed) {
  if (sentences.empty()) throw DataError("mlm_warmup: empty corpus");
  std::vector<std::vector<int>> tokenized;
  for (const std::string& s : sentences) {
    std::vector<int> ids = tokenize(s, vocab, c.max_article_tokens);
    if (!ids.empty()) tokenized.push_back(std::move(ids));
  }
  if (tokenized.empty()) throw DataError("mlm_warmup: corpus has no tokenizable sentences");

  Rng rng(seed);
  AdamOptimizer adam(c.learning_rate);
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    const std::vector<int>& ids = tokenized[rng.uniform_index(tokenized.size())];
    std::vector<int> masked = ids;
    std::vector<int> positions;
    for (std::size_t i = 0; i < masked.size(); ++i) {
      if (rng.uniform() < mask_rate) {
        masked[i] = Vocabulary::kUnkId;
        positions.push_back(static_cast<int>(i));
      }
    }
    if (positions.empty()) {
      const int forced = static_cast<int>(rng.uniform_index(masked.size()));
      masked[static_cast<std::size_t>(forced)] = Vocabulary::kUnkId;
      positions.push_back(forced);
    }
    Tape tape;
    Tensor states = encode(tape, masked, params, c);
    std::vector<Tensor> rows;
    std::vector<int> targets;
    for (int pos : positions) {
      rows.push_back(tape.row(states, pos));
      targets.push_back(ids[static_cast<std::size_t>(pos)]);
    }
    Tensor logits = tape.matmul(tape.stack_rows(rows), tape.transpose(params.get("embed/token")));
    Tensor loss = tape.cross_entropy_with_logits(logits, targets);
    params.zero_grads();
    tape.backward(loss);
    adam.step(params);
    trace.push_back(loss.item());
  }
  return trace;
}

}  // namespace storyhead
