// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/model.hpp"

#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <string>

#include "byte_io.hpp"

namespace specache {

namespace {

constexpr char kWeightMagic[4] = {'S', 'P', 'K', 'C'};
constexpr std::uint32_t kWeightVersion = 1;

// q/k projections are drawn wider than the rest so attention rows are peaked
// rather than near-uniform.
constexpr float kQkGain = 2.0f;

class UniformSource {
 public:
  explicit UniformSource(std::uint32_t seed) : engine_(seed) {}

  // [-1, 1) from the top 24 bits, identical on every platform
  float next() { return static_cast<float>(engine_() >> 8) * (2.0f / 16777216.0f) - 1.0f; }

  Matrix matrix(std::size_t rows, std::size_t cols, float amplitude) {
    Matrix m(rows, cols);
    for (float& v : m.data()) v = amplitude * next();
    return m;
  }

  std::vector<float> gain(std::size_t n) {
    std::vector<float> g(n);
    for (float& v : g) v = 1.0f + 0.1f * next();
    return g;
  }

 private:
  std::mt19937 engine_;
};

float fan_in_amplitude(std::size_t fan_in) { return std::sqrt(3.0f / static_cast<float>(fan_in)); }

void write_matrix(std::ostream& out, const Matrix& m) {
  for (float v : m.data()) detail::put_f32(out, v);
}

void write_vector(std::ostream& out, const std::vector<float>& v) {
  for (float x : v) detail::put_f32(out, x);
}

Matrix read_matrix(std::istream& in, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (float& v : m.data()) v = detail::get_f32(in);
  return m;
}

std::vector<float> read_vector(std::istream& in, std::size_t n) {
  std::vector<float> v(n);
  for (float& x : v) x = detail::get_f32(in);
  return v;
}

std::string io_error(const std::string& what, const std::filesystem::path& path) {
  return what + " '" + path.string() + "': " + std::strerror(errno);
}

}  // namespace

void DecoderConfig::validate() const {
  if (layers == 0 || q_heads == 0 || kv_heads == 0 || head_dim == 0 || vocab == 0 || hidden == 0 || ffn == 0) {
    throw InvalidArgument("decoder config: every dimension must be positive");
  }
  if (q_heads % kv_heads != 0) throw InvalidArgument("decoder config: q_heads must be a multiple of kv_heads");
  if (head_dim % 2 != 0) throw InvalidArgument("decoder config: head_dim must be even for RoPE");
  if (!(rope_base > 0.0)) throw InvalidArgument("decoder config: rope base must be positive");
}

Weights init_decoder(const DecoderConfig& config) {
  config.validate();
  UniformSource rng(config.seed);
  const std::size_t q_width = config.q_heads * config.head_dim;
  const std::size_t kv_width = config.kv_heads * config.head_dim;

  Weights w;
  w.config = config;
  w.embedding = rng.matrix(config.vocab, config.hidden, 1.0f);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights layer;
    layer.wq = rng.matrix(config.hidden, q_width, kQkGain * fan_in_amplitude(config.hidden));
    layer.wk = rng.matrix(config.hidden, kv_width, kQkGain * fan_in_amplitude(config.hidden));
    layer.wv = rng.matrix(config.hidden, kv_width, fan_in_amplitude(config.hidden));
    layer.wo = rng.matrix(q_width, config.hidden, fan_in_amplitude(q_width));
    layer.attn_norm = rng.gain(config.hidden);
    layer.ffn_norm = rng.gain(config.hidden);
    layer.w_gate = rng.matrix(config.hidden, config.ffn, fan_in_amplitude(config.hidden));
    layer.w_up = rng.matrix(config.hidden, config.ffn, fan_in_amplitude(config.hidden));
    layer.w_down = rng.matrix(config.ffn, config.hidden, fan_in_amplitude(config.ffn));
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = rng.gain(config.hidden);
  w.output = rng.matrix(config.hidden, config.vocab, fan_in_amplitude(config.hidden));
  return w;
}

void save_weights(const Weights& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(io_error("cannot open weight file for writing", path));
  const auto& c = weights.config;
  out.write(kWeightMagic, 4);
  for (std::size_t field : {std::size_t{kWeightVersion}, c.layers, c.q_heads, c.kv_heads, c.head_dim, c.vocab,
                            c.hidden, c.ffn, std::size_t{c.seed}}) {
    detail::put_u32(out, static_cast<std::uint32_t>(field));
  }
  write_matrix(out, weights.embedding);
  for (const auto& layer : weights.layers) {
    write_matrix(out, layer.wq);
    write_matrix(out, layer.wk);
    write_matrix(out, layer.wv);
    write_matrix(out, layer.wo);
    write_vector(out, layer.attn_norm);
    write_vector(out, layer.ffn_norm);
    write_matrix(out, layer.w_gate);
    write_matrix(out, layer.w_up);
    write_matrix(out, layer.w_down);
  }
  write_vector(out, weights.final_norm);
  write_matrix(out, weights.output);
  out.flush();
  if (!out) throw std::runtime_error(io_error("failed writing weight file", path));
}

Weights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(io_error("cannot open weight file", path));
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, kWeightMagic, 4) != 0) {
    throw InvalidArgument("weight file '" + path.string() + "': bad magic (expected SPKC)");
  }
  try {
    const std::uint32_t version = detail::get_u32(in);
    if (version != kWeightVersion) {
      throw InvalidArgument("weight file '" + path.string() + "': unsupported version " + std::to_string(version));
    }
    DecoderConfig c;
    c.layers = detail::get_u32(in);
    c.q_heads = detail::get_u32(in);
    c.kv_heads = detail::get_u32(in);
    c.head_dim = detail::get_u32(in);
    c.vocab = detail::get_u32(in);
    c.hidden = detail::get_u32(in);
    c.ffn = detail::get_u32(in);
    c.seed = detail::get_u32(in);
    c.validate();

    const std::size_t q_width = c.q_heads * c.head_dim;
    const std::size_t kv_width = c.kv_heads * c.head_dim;
    Weights w;
    w.config = c;
    w.embedding = read_matrix(in, c.vocab, c.hidden);
    for (std::size_t l = 0; l < c.layers; ++l) {
      LayerWeights layer;
      layer.wq = read_matrix(in, c.hidden, q_width);
      layer.wk = read_matrix(in, c.hidden, kv_width);
      layer.wv = read_matrix(in, c.hidden, kv_width);
      layer.wo = read_matrix(in, q_width, c.hidden);
      layer.attn_norm = read_vector(in, c.hidden);
      layer.ffn_norm = read_vector(in, c.hidden);
      layer.w_gate = read_matrix(in, c.hidden, c.ffn);
      layer.w_up = read_matrix(in, c.hidden, c.ffn);
      layer.w_down = read_matrix(in, c.ffn, c.hidden);
      w.layers.push_back(std::move(layer));
    }
    w.final_norm = read_vector(in, c.hidden);
    w.output = read_matrix(in, c.hidden, c.vocab);
    if (in.peek() != std::char_traits<char>::eof()) {
      throw InvalidArgument("weight file '" + path.string() + "': trailing bytes after output head");
    }
    return w;
  } catch (const std::runtime_error& e) {
    throw InvalidArgument("weight file '" + path.string() + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------

AttentionResult attend(const Matrix& q, const Matrix& keys, const Matrix& values, const AttendMask& mask) {
  Matrix raw = matmul_transposed(q, keys);
  const float scale = 1.0f / std::sqrt(static_cast<float>(q.cols()));
  for (float& v : raw.data()) v *= scale;
  AttentionResult result;
  result.scores = masked_softmax_rows(raw, mask);
  result.outputs = matmul(result.scores, values);
  return result;
}

Transformer::Transformer(const Weights& weights) : weights_(&weights) { weights.config.validate(); }

Matrix Transformer::embed(std::span<const TokenId> tokens) const {
  const auto& c = config();
  Matrix x(0, c.hidden);
  for (TokenId t : tokens) {
    if (t >= c.vocab) throw InvalidArgument("token id " + std::to_string(t) + " outside vocabulary");
    x.append_row(weights_->embedding.row(t));
  }
  return x;
}

HeadProjections Transformer::project(std::size_t layer, const Matrix& x,
                                     std::span<const std::size_t> positions) const {
  const auto& c = config();
  const auto& lw = weights_->layers.at(layer);
  if (positions.size() != x.rows()) throw InvalidArgument("project: one position per row required");

  Matrix normed(0, c.hidden);
  for (std::size_t r = 0; r < x.rows(); ++r) normed.append_row(rmsnorm(x.row(r), lw.attn_norm, 1e-5f));
  const Matrix q = matmul(normed, lw.wq);
  const Matrix k = matmul(normed, lw.wk);
  const Matrix v = matmul(normed, lw.wv);

  auto split = [&](const Matrix& m, std::size_t heads, bool rotate) {
    std::vector<Matrix> out(heads, Matrix(0, c.head_dim));
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t h = 0; h < heads; ++h) {
        auto slice = m.row(r).subspan(h * c.head_dim, c.head_dim);
        if (rotate) {
          out[h].append_row(rope_apply(slice, positions[r], c.rope_base));
        } else {
          out[h].append_row(slice);
        }
      }
    }
    return out;
  };
  return {split(q, c.q_heads, true), split(k, c.kv_heads, true), split(v, c.kv_heads, false)};
}

void Transformer::finish_layer(std::size_t layer, Matrix& x, const std::vector<Matrix>& head_outputs) const {
  const auto& c = config();
  const auto& lw = weights_->layers.at(layer);
  Matrix merged(x.rows(), c.q_heads * c.head_dim);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t h = 0; h < c.q_heads; ++h) {
      auto src = head_outputs[h].row(r);
      std::copy(src.begin(), src.end(), merged.row(r).begin() + static_cast<std::ptrdiff_t>(h * c.head_dim));
    }
  }
  const Matrix attn = matmul(merged, lw.wo);
  for (std::size_t i = 0; i < x.data().size(); ++i) x.data()[i] += attn.data()[i];

  Matrix normed(0, c.hidden);
  for (std::size_t r = 0; r < x.rows(); ++r) normed.append_row(rmsnorm(x.row(r), lw.ffn_norm, 1e-5f));
  Matrix gate = matmul(normed, lw.w_gate);
  const Matrix up = matmul(normed, lw.w_up);
  for (std::size_t i = 0; i < gate.data().size(); ++i) gate.data()[i] = silu(gate.data()[i]) * up.data()[i];
  const Matrix down = matmul(gate, lw.w_down);
  for (std::size_t i = 0; i < x.data().size(); ++i) x.data()[i] += down.data()[i];
}

Matrix Transformer::logits(const Matrix& x) const {
  Matrix normed(0, config().hidden);
  for (std::size_t r = 0; r < x.rows(); ++r) normed.append_row(rmsnorm(x.row(r), weights_->final_norm, 1e-5f));
  return matmul(normed, weights_->output);
}

}  // namespace specache
