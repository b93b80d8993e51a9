#pragma once

#include "metricforge/common.hpp"
#include "metricforge/layers.hpp"
#include "metricforge/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace metricforge {

struct EncoderConfig {
  Index input_width = 8;  // d_in, shared by text and image features
  Index width = 12;       // d
  Index seq_len = 8;      // L, output rows
  Index heads = 3;
  Index layers = 1;
  Index ffn_width = 0;    // 0 selects 2 * width
  std::uint64_t seed = 0;

  Index head_width() const noexcept { return heads > 0 ? width / heads : 0; }
  Index hidden_width() const noexcept { return ffn_width > 0 ? ffn_width : 2 * width; }
};

inline void validate(const EncoderConfig& cfg) {
  if (cfg.input_width < 1 || cfg.width < 1 || cfg.seq_len < 1 || cfg.heads < 1 ||
      cfg.layers < 1 || cfg.ffn_width < 0) {
    throw Error(Errc::InvalidConfig, "encoder dimensions must be positive");
  }
  if (cfg.width % cfg.heads != 0) {
    throw Error(Errc::InvalidConfig, "width " + std::to_string(cfg.width) +
                                         " is not divisible by " + std::to_string(cfg.heads) +
                                         " heads");
  }
}

template <typename Scalar>
struct FusionInput {
  Mat<Scalar> text;   // L_t x d_in
  Mat<Scalar> image;  // L_i x d_in
};

template <typename Scalar>
struct AttentionWeights {
  Mat<Scalar> query, key, value, output;  // d x d each
};

template <typename Scalar>
struct EncoderBlock {
  RowVec<Scalar> ln1_gain, ln1_shift;
  AttentionWeights<Scalar> attention;
  RowVec<Scalar> ln2_gain, ln2_shift;
  Mat<Scalar> ffn_in;           // d x hidden
  RowVec<Scalar> ffn_in_bias;
  Mat<Scalar> ffn_out;          // hidden x d
  RowVec<Scalar> ffn_out_bias;
};

template <typename Scalar>
struct EncoderWeights {
  EncoderConfig config;
  Mat<Scalar> text_proj;   // d_in x d
  RowVec<Scalar> text_bias;
  Mat<Scalar> image_proj;  // d_in x d
  RowVec<Scalar> image_bias;
  Mat<Scalar> positional;  // L x d, learned per-position vectors
  std::vector<EncoderBlock<Scalar>> blocks;
  RowVec<Scalar> final_gain, final_shift;

  static EncoderWeights zeros(const EncoderConfig& cfg) {
    validate(cfg);
    const Index d = cfg.width;
    const Index h = cfg.hidden_width();
    EncoderWeights w;
    w.config = cfg;
    w.text_proj = Mat<Scalar>::Zero(cfg.input_width, d);
    w.text_bias = RowVec<Scalar>::Zero(d);
    w.image_proj = Mat<Scalar>::Zero(cfg.input_width, d);
    w.image_bias = RowVec<Scalar>::Zero(d);
    w.positional = Mat<Scalar>::Zero(cfg.seq_len, d);
    for (Index l = 0; l < cfg.layers; ++l) {
      EncoderBlock<Scalar> b;
      b.ln1_gain = RowVec<Scalar>::Zero(d);
      b.ln1_shift = RowVec<Scalar>::Zero(d);
      b.attention = {Mat<Scalar>::Zero(d, d), Mat<Scalar>::Zero(d, d), Mat<Scalar>::Zero(d, d),
                     Mat<Scalar>::Zero(d, d)};
      b.ln2_gain = RowVec<Scalar>::Zero(d);
      b.ln2_shift = RowVec<Scalar>::Zero(d);
      b.ffn_in = Mat<Scalar>::Zero(d, h);
      b.ffn_in_bias = RowVec<Scalar>::Zero(h);
      b.ffn_out = Mat<Scalar>::Zero(h, d);
      b.ffn_out_bias = RowVec<Scalar>::Zero(d);
      w.blocks.push_back(std::move(b));
    }
    w.final_gain = RowVec<Scalar>::Zero(d);
    w.final_shift = RowVec<Scalar>::Zero(d);
    return w;
  }

  template <typename To>
  EncoderWeights<To> cast() const {
    auto out = EncoderWeights<To>::zeros(config);
    visit_encoder_params(
        [](const std::string&, auto& dst, const auto& src) { dst = src.template cast<To>(); }, out,
        *this);
    return out;
  }
};

/// Calls f(name, params...) for every encoder parameter, walking several
/// weight sets of identical configuration in lockstep.
template <typename F, typename... Sets>
void visit_encoder_params(F&& f, Sets&... sets) {
  f(std::string("encoder.text_proj"), sets.text_proj...);
  f(std::string("encoder.text_bias"), sets.text_bias...);
  f(std::string("encoder.image_proj"), sets.image_proj...);
  f(std::string("encoder.image_bias"), sets.image_bias...);
  f(std::string("encoder.positional"), sets.positional...);
  const std::size_t n = std::get<0>(std::forward_as_tuple(sets...)).blocks.size();
  for (std::size_t l = 0; l < n; ++l) {
    const std::string p = "encoder.block." + std::to_string(l) + ".";
    f(p + "ln1_gain", sets.blocks[l].ln1_gain...);
    f(p + "ln1_shift", sets.blocks[l].ln1_shift...);
    f(p + "attn.query", sets.blocks[l].attention.query...);
    f(p + "attn.key", sets.blocks[l].attention.key...);
    f(p + "attn.value", sets.blocks[l].attention.value...);
    f(p + "attn.output", sets.blocks[l].attention.output...);
    f(p + "ln2_gain", sets.blocks[l].ln2_gain...);
    f(p + "ln2_shift", sets.blocks[l].ln2_shift...);
    f(p + "ffn_in", sets.blocks[l].ffn_in...);
    f(p + "ffn_in_bias", sets.blocks[l].ffn_in_bias...);
    f(p + "ffn_out", sets.blocks[l].ffn_out...);
    f(p + "ffn_out_bias", sets.blocks[l].ffn_out_bias...);
  }
  f(std::string("encoder.final_gain"), sets.final_gain...);
  f(std::string("encoder.final_shift"), sets.final_shift...);
}

/// Matrices uniform in (-1/sqrt(d), 1/sqrt(d)) drawn in parameter-visit
/// order; biases and shifts zero; layer-norm gains one.
template <typename Scalar>
EncoderWeights<Scalar> init_encoder(const EncoderConfig& cfg) {
  auto w = EncoderWeights<Scalar>::zeros(cfg);
  SplitMix64 rng(cfg.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  visit_encoder_params(
      [&](const std::string& name, auto& m) {
        const bool is_gain = name.ends_with("_gain");
        const bool is_bias = name.ends_with("_bias") || name.ends_with("_shift");
        for (Index r = 0; r < m.rows(); ++r) {
          for (Index c = 0; c < m.cols(); ++c) {
            m(r, c) = is_gain   ? Scalar(1)
                      : is_bias ? Scalar(0)
                                : static_cast<Scalar>(rng.uniform(-bound, bound));
          }
        }
      },
      w);
  return w;
}

template <typename Scalar>
struct AttentionCache {
  Mat<Scalar> query, key, value;   // L x d
  std::vector<Mat<Scalar>> probs;  // per head, L x L
  Mat<Scalar> mixed;               // L x d, heads concatenated before the output projection
};

/// Multi-head self-attention over the rows of x. Keys at index >= valid are
/// padding and masked out with -inf logits.
template <typename Scalar>
Mat<Scalar> self_attention(const AttentionWeights<Scalar>& w, const Mat<Scalar>& x, Index heads,
                           Index valid, AttentionCache<Scalar>* cache = nullptr) {
  const Index dh = x.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  AttentionCache<Scalar> local;
  AttentionCache<Scalar>& c = cache ? *cache : local;
  c.query = x * w.query;
  c.key = x * w.key;
  c.value = x * w.value;
  c.probs.resize(static_cast<std::size_t>(heads));
  c.mixed.resize(x.rows(), x.cols());
  for (Index h = 0; h < heads; ++h) {
    const Mat<Scalar> logits =
        (c.query.middleCols(h * dh, dh) * c.key.middleCols(h * dh, dh).transpose()) * scale;
    auto& p = c.probs[static_cast<std::size_t>(h)];
    p = masked_row_softmax(logits, valid);
    c.mixed.middleCols(h * dh, dh) = p * c.value.middleCols(h * dh, dh);
  }
  return c.mixed * w.output;
}

template <typename Scalar>
Mat<Scalar> self_attention_backward(const AttentionWeights<Scalar>& w, const Mat<Scalar>& x,
                                    const AttentionCache<Scalar>& c, Index heads,
                                    const Mat<Scalar>& dout, AttentionWeights<Scalar>& grads) {
  const Index dh = x.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  grads.output.noalias() += c.mixed.transpose() * dout;
  const Mat<Scalar> dmixed = dout * w.output.transpose();
  Mat<Scalar> dq(x.rows(), x.cols()), dk(x.rows(), x.cols()), dv(x.rows(), x.cols());
  for (Index h = 0; h < heads; ++h) {
    const auto& p = c.probs[static_cast<std::size_t>(h)];
    const auto dmix_h = dmixed.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh) = p.transpose() * dmix_h;
    const Mat<Scalar> dprobs = dmix_h * c.value.middleCols(h * dh, dh).transpose();
    const Mat<Scalar> dlogits = row_softmax_backward(p, dprobs) * scale;
    dq.middleCols(h * dh, dh) = dlogits * c.key.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh) = dlogits.transpose() * c.query.middleCols(h * dh, dh);
  }
  grads.query.noalias() += x.transpose() * dq;
  grads.key.noalias() += x.transpose() * dk;
  grads.value.noalias() += x.transpose() * dv;
  Mat<Scalar> dx = dq * w.query.transpose();
  dx.noalias() += dk * w.key.transpose();
  dx.noalias() += dv * w.value.transpose();
  return dx;
}

template <typename Scalar>
struct BlockCache {
  Mat<Scalar> input;
  LayerNormCache<Scalar> ln1;
  Mat<Scalar> ln1_out;
  AttentionCache<Scalar> attention;
  LayerNormCache<Scalar> ln2;
  Mat<Scalar> ln2_out;
  Mat<Scalar> ffn_pre;
  Mat<Scalar> ffn_act;
};

template <typename Scalar>
struct EncoderCache {
  Index text_rows = 0;   // text tokens kept after truncation
  Index image_rows = 0;  // image tokens kept after truncation
  Index valid = 0;       // text_rows + image_rows; later rows are padding
  std::vector<BlockCache<Scalar>> blocks;
  LayerNormCache<Scalar> final_ln;
};

/// One pre-norm encoder block: h = x + MHA(LN1(x)); y = h + FFN(LN2(h)).
template <typename Scalar>
Mat<Scalar> encoder_block(const EncoderBlock<Scalar>& b, const Mat<Scalar>& x, Index heads, Index valid,
                          BlockCache<Scalar>* cache = nullptr) {
  BlockCache<Scalar> local;
  BlockCache<Scalar>& c = cache ? *cache : local;
  c.input = x;
  c.ln1_out = layer_norm(x, b.ln1_gain, b.ln1_shift, &c.ln1);
  Mat<Scalar> h = x + self_attention(b.attention, c.ln1_out, heads, valid, &c.attention);
  c.ln2_out = layer_norm(h, b.ln2_gain, b.ln2_shift, &c.ln2);
  c.ffn_pre = c.ln2_out * b.ffn_in;
  c.ffn_pre.rowwise() += b.ffn_in_bias;
  c.ffn_act = c.ffn_pre.unaryExpr([](Scalar v) { return gelu(v); });
  Mat<Scalar> y = c.ffn_act * b.ffn_out;
  y.rowwise() += b.ffn_out_bias;
  return h + y;
}

template <typename Scalar>
Mat<Scalar> encoder_block_backward(const EncoderBlock<Scalar>& b, const BlockCache<Scalar>& c,
                                   Index heads, const Mat<Scalar>& dy, EncoderBlock<Scalar>& g) {
  g.ffn_out.noalias() += c.ffn_act.transpose() * dy;
  g.ffn_out_bias += dy.colwise().sum();
  const Mat<Scalar> dact = dy * b.ffn_out.transpose();
  const Mat<Scalar> dpre =
      dact.cwiseProduct(c.ffn_pre.unaryExpr([](Scalar v) { return gelu_derivative(v); }));
  g.ffn_in.noalias() += c.ln2_out.transpose() * dpre;
  g.ffn_in_bias += dpre.colwise().sum();
  const Mat<Scalar> dln2 = dpre * b.ffn_in.transpose();
  Mat<Scalar> dh = dy + layer_norm_backward(dln2, b.ln2_gain, c.ln2, g.ln2_gain, g.ln2_shift);

  const Mat<Scalar> dln1 =
      self_attention_backward(b.attention, c.ln1_out, c.attention, heads, dh, g.attention);
  dh += layer_norm_backward(dln1, b.ln1_gain, c.ln1, g.ln1_gain, g.ln1_shift);
  return dh;
}

template <typename Scalar>
void check_fusion_input(const EncoderWeights<Scalar>& w, const FusionInput<Scalar>& x) {
  const EncoderConfig& cfg = w.config;
  require_shape(x.text.rows() >= 1 && x.image.rows() >= 1,
                "text and image features need at least one token each");
  require_shape(x.text.cols() == cfg.input_width && x.image.cols() == cfg.input_width,
                "feature width must equal encoder input width " + std::to_string(cfg.input_width));
  require_finite(x.text, "text features");
  require_finite(x.image, "image features");
}

/// Embeds and concatenates text then image tokens, truncates/pads to L rows,
/// adds positional vectors, runs the blocks and a final layer norm.
template <typename Scalar>
Mat<Scalar> encode(const EncoderWeights<Scalar>& w, const FusionInput<Scalar>& x,
                   EncoderCache<Scalar>* cache = nullptr) {
  check_fusion_input(w, x);
  const EncoderConfig& cfg = w.config;
  EncoderCache<Scalar> local;
  EncoderCache<Scalar>& c = cache ? *cache : local;
  c.text_rows = std::min(x.text.rows(), cfg.seq_len);
  c.image_rows = std::min(x.image.rows(), cfg.seq_len - c.text_rows);
  c.valid = c.text_rows + c.image_rows;

  Mat<Scalar> h = w.positional;
  if (c.text_rows > 0) {
    h.topRows(c.text_rows) += x.text.topRows(c.text_rows) * w.text_proj;
    h.topRows(c.text_rows).rowwise() += w.text_bias;
  }
  if (c.image_rows > 0) {
    h.middleRows(c.text_rows, c.image_rows) += x.image.topRows(c.image_rows) * w.image_proj;
    h.middleRows(c.text_rows, c.image_rows).rowwise() += w.image_bias;
  }

  c.blocks.resize(w.blocks.size());
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    h = encoder_block(w.blocks[l], h, cfg.heads, c.valid, &c.blocks[l]);
  }
  Mat<Scalar> ef = layer_norm(h, w.final_gain, w.final_shift, &c.final_ln);
  require_finite(ef, "encoded features");
  return ef;
}

/// Accumulates encoder weight gradients given d/dEF.
template <typename Scalar>
void encode_backward(const EncoderWeights<Scalar>& w, const FusionInput<Scalar>& x,
                     const EncoderCache<Scalar>& c, const Mat<Scalar>& d_ef,
                     EncoderWeights<Scalar>& g) {
  Mat<Scalar> dh = layer_norm_backward(d_ef, w.final_gain, c.final_ln, g.final_gain, g.final_shift);
  for (std::size_t l = w.blocks.size(); l-- > 0;) {
    dh = encoder_block_backward(w.blocks[l], c.blocks[l], w.config.heads, dh, g.blocks[l]);
  }
  g.positional += dh;
  if (c.text_rows > 0) {
    const auto dt = dh.topRows(c.text_rows);
    g.text_proj.noalias() += x.text.topRows(c.text_rows).transpose() * dt;
    g.text_bias += dt.colwise().sum();
  }
  if (c.image_rows > 0) {
    const auto di = dh.middleRows(c.text_rows, c.image_rows);
    g.image_proj.noalias() += x.image.topRows(c.image_rows).transpose() * di;
    g.image_bias += di.colwise().sum();
  }
}

}  // namespace metricforge
