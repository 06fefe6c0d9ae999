#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctf/rng.hpp"
#include "ctf/text.hpp"
#include "ctf/util.hpp"

namespace ctf {

// Out-of-vocabulary sentinel. The angle brackets cannot survive tokenize(),
// so no raw input collides with it.
inline const std::string kOovToken = "<oov>";

struct ModelDims {
  int embed_dim = 16;
  int window = 3;
  int channels = 32;

  bool operator==(const ModelDims&) const = default;
};

/// All learnable parameters of the classifier
///   g(x) = dense(maxpool_over_positions(relu(conv1d(embed(x)))))
/// Documents shorter than the window are right-padded with an implicit
/// all-zero embedding.
struct ModelParams {
  ModelDims dims;
  std::vector<std::string> vocab;    // index -> token; vocab[0] == kOovToken
  std::map<std::string, int> index;  // token -> index
  std::vector<double> embeddings;    // |V| x d, row-major
  std::vector<double> conv_w;        // [window][d][channels], flattened
  std::vector<double> conv_b;        // channels
  std::vector<double> dense_w;       // channels
  double dense_b = 0.0;

  std::size_t vocab_size() const { return vocab.size(); }

  int token_index(const Token& t) const {
    const auto it = index.find(t);
    return it == index.end() ? 0 : it->second;
  }
};

/// Sorted corpus tokens behind the two reserved entries. `extra_terms` makes
/// tokens reachable that training may introduce through substitution.
inline std::vector<std::string> build_vocab(const std::vector<Document>& docs,
                                            const std::vector<IdentityTerm>& extra_terms = {}) {
  std::set<std::string> tokens;
  for (const auto& doc : docs) {
    for (const auto& t : doc.tokens) tokens.insert(t);
  }
  for (const auto& term : extra_terms) {
    for (const auto& t : term.tokens) tokens.insert(t);
  }
  std::vector<std::string> out = {kOovToken, kIdentityToken};
  for (const auto& t : tokens) {
    if (t != kOovToken && t != kIdentityToken) out.push_back(t);
  }
  return out;
}

/// Seeded fan-in-scaled uniform init; deterministic per seed.
inline ModelParams init_params(const std::vector<std::string>& vocab, const ModelDims& dims,
                               std::int64_t seed) {
  if (vocab.empty()) throw std::invalid_argument("init_params: empty vocabulary");
  if (dims.embed_dim < 1 || dims.window < 1 || dims.channels < 1) {
    throw std::invalid_argument("init_params: dims must be >= 1");
  }
  ModelParams p;
  p.dims = dims;
  p.vocab = vocab;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (!p.index.emplace(vocab[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("init_params: duplicate vocab token " + vocab[i]);
    }
  }
  if (p.index.find(kOovToken) == p.index.end() || p.index.at(kOovToken) != 0) {
    throw std::invalid_argument("init_params: vocab[0] must be " + kOovToken);
  }
  const auto d = static_cast<std::size_t>(dims.embed_dim);
  const auto w = static_cast<std::size_t>(dims.window);
  const auto c = static_cast<std::size_t>(dims.channels);
  Rng rng(Rng::mix(static_cast<std::uint64_t>(seed), 0x1217));
  auto fill_uniform = [&](std::vector<double>& v, std::size_t n, double scale) {
    v.resize(n);
    for (auto& x : v) x = (rng.uniform_real() * 2.0 - 1.0) * scale;
  };
  fill_uniform(p.embeddings, vocab.size() * d, std::sqrt(3.0 / static_cast<double>(d)));
  fill_uniform(p.conv_w, w * d * c, std::sqrt(3.0 / static_cast<double>(w * d)));
  p.conv_b.assign(c, 0.0);
  fill_uniform(p.dense_w, c, std::sqrt(3.0 / static_cast<double>(c)));
  p.dense_b = 0.0;
  return p;
}

// Cheap content fingerprint over the small tensors; catches a cache paired
// with the wrong or since-updated params.
inline std::uint64_t params_stamp(const ModelParams& p) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  const std::uint64_t sizes[] = {p.vocab.size(), p.conv_w.size(), p.conv_b.size(),
                                 p.dense_w.size()};
  mix_bytes(sizes, sizeof sizes);
  mix_bytes(p.conv_b.data(), p.conv_b.size() * sizeof(double));
  mix_bytes(p.dense_w.data(), p.dense_w.size() * sizeof(double));
  mix_bytes(&p.dense_b, sizeof p.dense_b);
  return h;
}

struct ForwardCache {
  std::vector<int> token_ids;    // after OOV mapping; empty docs become [oov]
  std::size_t n_pos = 0;
  std::vector<double> conv_pre;  // n_pos x channels, pre-activation
  std::vector<int> argmax;       // winning position per channel
  std::vector<double> pooled;    // channels
  double logit = 0.0;
  std::uint64_t stamp = 0;
};

inline ForwardCache forward(const ModelParams& p, const Document& doc) {
  const auto d = static_cast<std::size_t>(p.dims.embed_dim);
  const auto w = static_cast<std::size_t>(p.dims.window);
  const auto c = static_cast<std::size_t>(p.dims.channels);
  ForwardCache cache;
  cache.token_ids.reserve(doc.tokens.size());
  for (const auto& t : doc.tokens) cache.token_ids.push_back(p.token_index(t));
  if (cache.token_ids.empty()) cache.token_ids.push_back(0);
  const std::size_t n = cache.token_ids.size();
  cache.n_pos = std::max(n, w) - w + 1;
  cache.conv_pre.assign(cache.n_pos * c, 0.0);
  for (std::size_t pos = 0; pos < cache.n_pos; ++pos) {
    double* pre = cache.conv_pre.data() + pos * c;
    for (std::size_t k = 0; k < c; ++k) pre[k] = p.conv_b[k];
    for (std::size_t i = 0; i < w; ++i) {
      const std::size_t t = pos + i;
      if (t >= n) continue;  // zero padding
      const double* e = p.embeddings.data() + static_cast<std::size_t>(cache.token_ids[t]) * d;
      const double* wrow = p.conv_w.data() + i * d * c;
      for (std::size_t j = 0; j < d; ++j) {
        const double ej = e[j];
        const double* wj = wrow + j * c;
        for (std::size_t k = 0; k < c; ++k) pre[k] += wj[k] * ej;
      }
    }
  }
  cache.argmax.assign(c, 0);
  cache.pooled.assign(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double best = std::max(cache.conv_pre[k], 0.0);
    int best_pos = 0;
    for (std::size_t pos = 1; pos < cache.n_pos; ++pos) {
      const double v = std::max(cache.conv_pre[pos * c + k], 0.0);
      if (v > best) {  // ties keep the lowest position
        best = v;
        best_pos = static_cast<int>(pos);
      }
    }
    cache.pooled[k] = best;
    cache.argmax[k] = best_pos;
  }
  cache.logit = p.dense_b;
  for (std::size_t k = 0; k < c; ++k) cache.logit += p.dense_w[k] * cache.pooled[k];
  cache.stamp = params_stamp(p);
  return cache;
}

// Numerically stable; clamped to the open interval so finite logits never
// round to exactly 0 or 1.
inline double sigmoid(double g) {
  double p;
  if (g >= 0) {
    p = 1.0 / (1.0 + std::exp(-g));
  } else {
    const double e = std::exp(g);
    p = e / (1.0 + e);
  }
  if (p <= 0.0) p = std::numeric_limits<double>::denorm_min();
  if (p >= 1.0) p = std::nextafter(1.0, 0.0);
  return p;
}

inline double predict(const ModelParams& p, const Document& doc) {
  return sigmoid(forward(p, doc).logit);
}

struct Gradients {
  std::vector<double> embeddings;
  std::vector<double> conv_w;
  std::vector<double> conv_b;
  std::vector<double> dense_w;
  double dense_b = 0.0;

  static Gradients zeros_like(const ModelParams& p) {
    Gradients g;
    g.embeddings.assign(p.embeddings.size(), 0.0);
    g.conv_w.assign(p.conv_w.size(), 0.0);
    g.conv_b.assign(p.conv_b.size(), 0.0);
    g.dense_w.assign(p.dense_w.size(), 0.0);
    return g;
  }
};

/// Accumulates dloss_dlogit times the exact logit gradient into `g`. Max-pool
/// routes gradient to the cached argmax position; ReLU subgradient at 0 is 0.
inline void backward_into(const ModelParams& p, const ForwardCache& cache, double dloss_dlogit,
                          Gradients& g) {
  if (cache.stamp != params_stamp(p)) {
    throw std::invalid_argument("backward: cache does not match params");
  }
  const auto d = static_cast<std::size_t>(p.dims.embed_dim);
  const auto w = static_cast<std::size_t>(p.dims.window);
  const auto c = static_cast<std::size_t>(p.dims.channels);
  const std::size_t n = cache.token_ids.size();
  g.dense_b += dloss_dlogit;
  for (std::size_t k = 0; k < c; ++k) {
    g.dense_w[k] += dloss_dlogit * cache.pooled[k];
    const auto pos = static_cast<std::size_t>(cache.argmax[k]);
    if (cache.conv_pre[pos * c + k] <= 0.0) continue;  // ReLU inactive
    const double dpre = dloss_dlogit * p.dense_w[k];
    if (dpre == 0.0) continue;
    g.conv_b[k] += dpre;
    for (std::size_t i = 0; i < w; ++i) {
      const std::size_t t = pos + i;
      if (t >= n) continue;  // padding embeds as a constant zero
      const auto row = static_cast<std::size_t>(cache.token_ids[t]) * d;
      const double* e = p.embeddings.data() + row;
      const double* wrow = p.conv_w.data() + i * d * c;
      for (std::size_t j = 0; j < d; ++j) {
        g.conv_w[i * d * c + j * c + k] += dpre * e[j];
        g.embeddings[row + j] += dpre * wrow[j * c + k];
      }
    }
  }
}

inline Gradients backward(const ModelParams& p, const ForwardCache& cache, double dloss_dlogit) {
  Gradients g = Gradients::zeros_like(p);
  backward_into(p, cache, dloss_dlogit, g);
  return g;
}

}  // namespace ctf
