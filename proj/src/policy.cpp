#include "arl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace arl {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

PolicyParams PolicyParams::zeros(std::uint32_t F, std::uint32_t V, std::uint32_t h) {
  PolicyParams p;
  p.feature_buckets = F;
  p.vocab_size = V;
  p.context_window = h;
  p.matrices["W"] = Matrix(F, V);
  return p;
}

void PolicyParams::validate() const {
  auto it = matrices.find("W");
  if (it == matrices.end()) throw std::invalid_argument("params missing required matrix W");
  if (it->second.rows != feature_buckets || it->second.cols != vocab_size) {
    throw std::invalid_argument("W shape does not match metadata");
  }
  for (const auto& [name, m] : matrices) {
    if (m.data.size() != m.rows * m.cols) throw std::invalid_argument("matrix size mismatch: " + name);
    for (double x : m.data) {
      if (!std::isfinite(x)) throw std::invalid_argument("non-finite entry in matrix " + name);
    }
  }
}

std::uint32_t feature_bucket(std::span<const Token> history, std::uint32_t h, std::uint32_t F) {
  if (history.empty()) return 0;
  std::size_t w = std::min<std::size_t>(h, history.size());
  return static_cast<std::uint32_t>(hash_tokens(history.subspan(history.size() - w)) % F);
}

std::vector<double> context_features(std::span<const Token> history, std::uint32_t h, std::uint32_t F) {
  std::vector<double> phi(F, 0.0);
  phi[feature_bucket(history, h, F)] = 1.0;
  return phi;
}

namespace {

// Stable softmax of one W row at the given temperature.
std::vector<double> bucket_softmax(const PolicyParams& params, std::uint32_t bucket,
                                   double temperature) {
  const Matrix& W = params.weights();
  std::size_t V = W.cols;
  std::vector<double> p(V);
  double mx = kNegInf;
  for (std::size_t v = 0; v < V; ++v) {
    p[v] = W.at(bucket, v) / temperature;
    mx = std::max(mx, p[v]);
  }
  double sum = 0.0;
  for (auto& x : p) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : p) x /= sum;
  return p;
}

void nucleus_truncate(std::vector<double>& p, double top_p) {
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  double cum = 0.0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    cum += p[order[i]];
    kept = i + 1;
    if (cum >= top_p) break;
  }
  std::vector<double> out(p.size(), 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < kept; ++i) mass += p[order[i]];
  for (std::size_t i = 0; i < kept; ++i) out[order[i]] = p[order[i]] / mass;
  p = std::move(out);
}

}  // namespace

std::vector<double> token_distribution(const PolicyParams& params, std::span<const Token> history,
                                       const SamplingConfig& config) {
  std::uint32_t bucket = feature_bucket(history, params.context_window, params.feature_buckets);
  std::vector<double> p = bucket_softmax(params, bucket, config.temperature);
  if (config.top_p < 1.0) nucleus_truncate(p, config.top_p);
  return p;
}

double sequence_logprob(const PolicyParams& params, std::span<const Token> history,
                        std::span<const Token> tokens, const SamplingConfig& config) {
  std::vector<Token> ctx(history.begin(), history.end());
  double total = 0.0;
  for (Token t : tokens) {
    std::vector<double> p = token_distribution(params, ctx, config);
    if (t >= p.size() || p[t] <= 0.0) return kNegInf;  // impossible_token
    total += std::log(p[t]);
    ctx.push_back(t);
  }
  return total;
}

double entropy(const PolicyParams& params, std::span<const Token> history) {
  std::vector<double> p = token_distribution(params, history, training_config());
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

Matrix grad_log_prob(const PolicyParams& params, std::span<const Token> history,
                     std::span<const Token> tokens) {
  Matrix g(params.feature_buckets, params.vocab_size);
  std::vector<Token> ctx(history.begin(), history.end());
  for (Token t : tokens) {
    std::uint32_t bucket = feature_bucket(ctx, params.context_window, params.feature_buckets);
    std::vector<double> p = bucket_softmax(params, bucket, 1.0);
    for (std::size_t v = 0; v < p.size(); ++v) g.at(bucket, v) -= p[v];
    g.at(bucket, t) += 1.0;
    ctx.push_back(t);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

std::size_t sample_index(const std::vector<double>& p, std::mt19937_64& rng) {
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last_positive = i;
    cum += p[i];
    if (u < cum) return i;
  }
  return last_positive;  // rounding fell off the end
}

// Softmax at config temperature restricted to `allowed`, renormalized.
std::vector<double> restricted_distribution(const PolicyParams& params, std::uint32_t bucket,
                                            double temperature, const std::vector<Token>& allowed) {
  const Matrix& W = params.weights();
  double mx = kNegInf;
  for (Token v : allowed) mx = std::max(mx, W.at(bucket, v) / temperature);
  std::vector<double> p(W.cols, 0.0);
  double sum = 0.0;
  for (Token v : allowed) {
    p[v] = std::exp(W.at(bucket, v) / temperature - mx);
    sum += p[v];
  }
  for (Token v : allowed) p[v] /= sum;
  return p;
}

std::vector<double> top_k_probs(const std::vector<double>& p, std::size_t k) {
  std::vector<double> sorted(p);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  sorted.resize(std::min(k, sorted.size()));
  return sorted;
}

}  // namespace

StepSample sample_step(const PolicyParams& params, std::span<const Token> history,
                       const SamplingConfig& config, const ToolRegistry& registry,
                       std::mt19937_64& rng, std::size_t max_tokens, std::size_t topk_k) {
  StepSample out;
  std::vector<Token> ctx(history.begin(), history.end());
  std::size_t k = std::min<std::size_t>(topk_k, params.vocab_size);

  auto bucket_of = [&] { return feature_bucket(ctx, params.context_window, params.feature_buckets); };
  auto record = [&](Token t, double logp) {
    out.tokens.push_back(t);
    out.logprobs.push_back(logp);
    if (k > 0) {
      // Top-k rows always reflect the untruncated inference-temperature
      // softmax, independent of any decoding constraint at this position.
      out.topk.push_back(top_k_probs(bucket_softmax(params, bucket_of(), config.temperature), k));
    }
    ctx.push_back(t);
  };
  auto sample_constrained = [&](const std::vector<Token>& allowed) -> Token {
    if (allowed.empty()) throw DecodeFailure("decode_failure: empty allowed token set");
    if (out.tokens.size() >= max_tokens) {
      throw DecodeFailure("decode_failure: token cap hit inside a tool call");
    }
    std::vector<double> p = restricted_distribution(params, bucket_of(), config.temperature, allowed);
    Token t = static_cast<Token>(sample_index(p, rng));
    record(t, std::log(p[t]));
    return t;
  };

  while (out.tokens.size() < max_tokens) {
    std::vector<double> p = token_distribution(params, ctx, config);
    Token t = static_cast<Token>(sample_index(p, rng));
    double logp = std::log(p[t]);
    record(t, logp);
    if (t == vocab::kEndOfAction) {
      out.action = GenerationAction{out.tokens, RoleTag::think};
      return out;
    }
    if (t == vocab::kAnswer) {
      out.action = GenerationAction{out.tokens, RoleTag::answer};
      return out;
    }
    if (t == vocab::kBeginCall) {
      std::vector<Token> names;
      for (std::size_t i = 0; i < registry.size(); ++i) {
        Token nt = vocab::tool_name_token(i);
        if (nt < params.vocab_size) names.push_back(nt);
      }
      Token name_tok = sample_constrained(names);
      const ToolSpec& spec = registry.tools()[name_tok - vocab::kFirstContent];

      ToolCall call;
      call.tool_name = spec.name;
      std::vector<Token> content;
      for (Token v = vocab::kFirstContent; v < params.vocab_size; ++v) content.push_back(v);
      for (const auto& param : spec.params) {
        Token vt = sample_constrained(content);
        call.args[param.name] = decode_arg_value(vt, param.type, params.vocab_size);
      }
      sample_constrained({vocab::kEndCall});
      out.action = std::move(call);
      return out;
    }
    // content token inside a think segment; keep going
  }
  out.action = GenerationAction{out.tokens, RoleTag::think};
  return out;
}

StepSample sample_step(const PolicyParams& params, std::span<const Token> history,
                       const SamplingConfig& config, const ToolRegistry& registry,
                       std::size_t max_tokens, std::size_t topk_k) {
  std::mt19937_64 rng(config.seed);
  return sample_step(params, history, config, registry, rng, max_tokens, topk_k);
}

// ---------------------------------------------------------------------------
// Token <-> value codecs

Json decode_arg_value(Token t, ParamType type, Token V) {
  std::uint32_t n = t - vocab::kFirstContent;
  switch (type) {
    case ParamType::integer: return Json(static_cast<std::int64_t>(n));
    case ParamType::real: return Json(static_cast<double>(n));
    case ParamType::string: return Json("v" + std::to_string(n));
    case ParamType::boolean: return Json(n % 2 == 1);
    case ParamType::list: return Json::array({static_cast<std::int64_t>(n)});
    case ParamType::map: return Json{{"v", static_cast<std::int64_t>(n)}};
  }
  return Json();
}

Token encode_arg_value(const Json& v, ParamType type, Token V) {
  const std::uint32_t range = static_cast<std::uint32_t>(vocab::content_range(V));
  Json c = canonicalize(v);
  switch (type) {
    case ParamType::integer:
    case ParamType::real:
      if (c.is_number_integer()) {
        std::int64_t n = c.get<std::int64_t>();
        if (n >= 0 && n < range) return vocab::kFirstContent + static_cast<Token>(n);
      }
      break;
    case ParamType::string:
      if (c.is_string()) {
        const std::string& s = c.get_ref<const std::string&>();
        if (s.size() > 1 && s[0] == 'v') {
          std::uint32_t n = 0;
          bool digits = true;
          for (std::size_t i = 1; i < s.size(); ++i) {
            if (!std::isdigit(static_cast<unsigned char>(s[i]))) { digits = false; break; }
            n = n * 10 + (s[i] - '0');
          }
          if (digits && n < range) return vocab::kFirstContent + n;
        }
      }
      break;
    case ParamType::boolean:
      if (c.is_boolean()) return vocab::kFirstContent + (c.get<bool>() ? 1u : 0u) % range;
      break;
    default:
      break;
  }
  std::string text = canonical_dump(c);
  std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
  return vocab::kFirstContent + static_cast<Token>(fnv1a64(bytes) % range);
}

std::vector<Token> encode_tool_call(const ToolCall& call, const ToolRegistry& registry, Token V) {
  std::vector<Token> tokens{vocab::kBeginCall};
  const ToolSpec* spec = registry.find(call.tool_name);
  if (spec != nullptr) {
    std::size_t index = spec - registry.tools().data();
    tokens.push_back(vocab::tool_name_token(index));
    for (const auto& p : spec->params) {
      auto it = call.args.find(p.name);
      if (it != call.args.end()) tokens.push_back(encode_arg_value(*it, p.type, V));
    }
  } else {
    std::span<const std::uint8_t> bytes(
        reinterpret_cast<const std::uint8_t*>(call.tool_name.data()), call.tool_name.size());
    tokens.push_back(vocab::kFirstContent +
                     static_cast<Token>(fnv1a64(bytes) % vocab::content_range(V)));
    for (auto it = call.args.begin(); it != call.args.end(); ++it) {
      tokens.push_back(encode_arg_value(it.value(), ParamType::string, V));
    }
  }
  tokens.push_back(vocab::kEndCall);
  return tokens;
}

std::vector<Token> tokenize_text(const std::string& text, Token V, std::size_t max_tokens) {
  std::vector<Token> tokens;
  std::istringstream in(text);
  std::string word;
  while (tokens.size() < max_tokens && in >> word) {
    std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(word.data()), word.size());
    tokens.push_back(vocab::kFirstContent + static_cast<Token>(fnv1a64(bytes) % vocab::content_range(V)));
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& b, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) b.push_back(static_cast<char>((v >> shift) & 0xff));
}

void put_f64(std::string& b, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  for (int shift = 0; shift < 64; shift += 8) b.push_back(static_cast<char>((bits >> shift) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}

  std::uint16_t u16() {
    std::uint16_t lo = byte();
    std::uint16_t hi = byte();
    return static_cast<std::uint16_t>(lo | hi << 8);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int shift = 0; shift < 32; shift += 8) v |= static_cast<std::uint32_t>(byte()) << shift;
    return v;
  }
  double f64() {
    std::uint64_t bits = 0;
    for (int shift = 0; shift < 64; shift += 8) bits |= static_cast<std::uint64_t>(byte()) << shift;
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
  }
  std::string bytes(std::size_t n) {
    if (pos_ + n > b_.size()) throw std::runtime_error("truncated checkpoint");
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::uint8_t byte() {
    if (pos_ >= b_.size()) throw std::runtime_error("truncated checkpoint");
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const PolicyParams& params, const std::string& path) {
  params.validate();
  std::string buf = "AFPK";
  put_u16(buf, 1);
  for (const auto& [name, m] : params.matrices) {
    put_u16(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<std::uint32_t>(m.rows));
    put_u32(buf, static_cast<std::uint32_t>(m.cols));
    for (double d : m.data) put_f64(buf, d);
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot rename checkpoint into place: " + path);
  }
}

PolicyParams load_checkpoint(const std::string& path, std::uint32_t context_window) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(buf);
  if (r.bytes(4) != "AFPK") throw std::runtime_error("bad checkpoint magic");
  std::uint16_t version = r.u16();
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  PolicyParams p;
  p.context_window = context_window;
  while (!r.done()) {
    std::string name = r.bytes(r.u16());
    Matrix m;
    m.rows = r.u32();
    m.cols = r.u32();
    m.data.resize(m.rows * m.cols);
    for (auto& d : m.data) d = r.f64();
    p.matrices[name] = std::move(m);
  }
  auto it = p.matrices.find("W");
  if (it == p.matrices.end()) throw std::runtime_error("checkpoint missing matrix W");
  p.feature_buckets = static_cast<std::uint32_t>(it->second.rows);
  p.vocab_size = static_cast<std::uint32_t>(it->second.cols);
  return p;
}

PolicyParams make_structured_init(std::uint32_t F, std::uint32_t V, std::uint32_t h,
                                  double begin_call_logit, double answer_logit,
                                  double end_of_action_logit) {
  PolicyParams p = PolicyParams::zeros(F, V, h);
  Matrix& W = p.weights();
  for (std::uint32_t f = 0; f < F; ++f) {
    W.at(f, vocab::kBeginCall) = begin_call_logit;
    W.at(f, vocab::kAnswer) = answer_logit;
    W.at(f, vocab::kEndOfAction) = end_of_action_logit;
  }
  return p;
}

}  // namespace arl
