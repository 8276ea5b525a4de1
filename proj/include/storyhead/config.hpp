#pragma once

#include <string>

#include <json.hpp>

#include "storyhead/common.hpp"

namespace storyhead {

enum class Activation { relu, gelu };

inline std::string activation_name(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

inline Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw DataError("config: unknown activation '" + name + "'");
}

// Transformer building-block dimensions plus the training knobs that belong
// to a preset. The projection bound is hidden_dim: num_heads * value_dim
// must not exceed it (both presets use equality).
struct ModelConfig {
  int num_layers = 2;
  int num_heads = 2;
  int hidden_dim = 32;
  int value_dim = 16;
  int vocab_size = 1024;
  int max_positions = 64;
  int max_article_tokens = 48;
  int ffn_dim = 128;
  Activation activation = Activation::relu;
  double learning_rate = 1e-3;
  int batch_size = 8;
  // Recompute article weights at every decoding step (default), or hold them
  // fixed per story from mean-pooled encoder states.
  bool static_article_weights = false;

  int projection_dim() const { return num_heads * value_dim; }

  static ModelConfig desk_scale() { return ModelConfig{}; }

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.num_layers = 12;
    c.num_heads = 16;
    c.hidden_dim = 768;
    c.value_dim = 48;
    c.vocab_size = 50000;
    c.max_positions = 256;
    c.max_article_tokens = 200;
    c.ffn_dim = 4 * 768;
    c.learning_rate = 0.05;
    c.batch_size = 1024;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "desk-scale") return desk_scale();
    if (name == "paper-scale") return paper_scale();
    throw DataError("config: unknown preset '" + name + "' (expected desk-scale or paper-scale)");
  }

  void validate() const {
    if (num_layers <= 0 || num_heads <= 0 || hidden_dim <= 0 || value_dim <= 0 || vocab_size <= 0 ||
        max_positions <= 0 || max_article_tokens <= 0 || ffn_dim <= 0 || batch_size <= 0) {
      throw DataError("config: all dimensions must be positive");
    }
    if (projection_dim() > hidden_dim) {
      throw DataError("config: num_heads*value_dim = " + std::to_string(projection_dim()) +
                      " exceeds the projection bound hidden_dim = " + std::to_string(hidden_dim));
    }
    if (max_article_tokens > max_positions) {
      throw DataError("config: max_article_tokens exceeds max_positions");
    }
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"num_layers", num_layers},
                          {"num_heads", num_heads},
                          {"hidden_dim", hidden_dim},
                          {"value_dim", value_dim},
                          {"vocab_size", vocab_size},
                          {"max_positions", max_positions},
                          {"max_article_tokens", max_article_tokens},
                          {"ffn_dim", ffn_dim},
                          {"activation", activation_name(activation)},
                          {"learning_rate", learning_rate},
                          {"batch_size", batch_size},
                          {"static_article_weights", static_article_weights}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.value_dim = j.at("value_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.max_article_tokens = j.at("max_article_tokens").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.activation = activation_from_name(j.at("activation").get<std::string>());
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.static_article_weights = j.value("static_article_weights", false);
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig& o) const = default;
};

// Beam-search settings for headline generation.
struct GenerationConfig {
  int beam_width = 4;
  int max_headline_tokens = 16;
  double length_norm_exponent = 0.6;
  std::uint64_t seed = 0;

  void validate() const {
    if (beam_width < 1) throw DataError("generation: beam_width must be >= 1");
    if (max_headline_tokens < 1) throw DataError("generation: max_headline_tokens must be >= 1");
  }
};

}  // namespace storyhead
