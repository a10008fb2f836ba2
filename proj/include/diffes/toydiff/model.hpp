#pragma once

// Small class-conditional transformer denoiser over 4x4 patches of a 16x16
// image. Predicts the added noise. Every block has an attention group
// (fused qkv projection + output projection) and an MLP (fc1, GELU, fc2);
// these four matrices are the prunable layers.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/toydiff/dataset.hpp"

namespace diffes::toydiff {

struct ModelConfig {
    int image_side = kImageSide;
    int patch = 4;
    int embed = 32;
    int heads = 2;
    int hidden = 64;
    int blocks = 4;
    int classes = kNumClasses;

    int tokens() const noexcept { return (image_side / patch) * (image_side / patch); }
    int patch_dim() const noexcept { return patch * patch; }
    int head_dim() const noexcept { return embed / heads; }
    int pixels() const noexcept { return image_side * image_side; }

    void validate() const {
        if (image_side <= 0 || patch <= 0 || image_side % patch != 0)
            throw Error(ErrorKind::InvalidConfig, "image side must be a positive multiple of the patch size");
        if (embed <= 0 || heads <= 0 || embed % heads != 0)
            throw Error(ErrorKind::InvalidConfig, "embed dim must be divisible by the head count");
        if (embed % 2 != 0) throw Error(ErrorKind::InvalidConfig, "embed dim must be even");
        if (hidden <= 0 || blocks <= 0 || classes <= 0)
            throw Error(ErrorKind::InvalidConfig, "hidden, blocks and classes must be positive");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class LayerKind : int { AttnQkv = 0, AttnOut = 1, MlpFc1 = 2, MlpFc2 = 3 };
inline constexpr int kLayersPerBlock = 4;

/// Stable identifier of a prunable linear layer.
struct LayerId {
    int block = 0;
    LayerKind kind = LayerKind::AttnQkv;

    int index() const noexcept { return block * kLayersPerBlock + static_cast<int>(kind); }
    static LayerId from_index(int i) { return {i / kLayersPerBlock, static_cast<LayerKind>(i % kLayersPerBlock)}; }

    std::string name() const {
        static constexpr std::array<const char*, 4> suffix{"attn.qkv", "attn.out", "mlp.fc1", "mlp.fc2"};
        return "blocks." + std::to_string(block) + "." + suffix[static_cast<std::size_t>(kind)];
    }

    friend auto operator<=>(const LayerId&, const LayerId&) = default;
};

struct Tensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<float> w;

    std::size_t size() const noexcept { return w.size(); }
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Per-block overrides applied during a forward pass. Null pointers fall
/// back to the backbone weights; null masks mean everything is active.
/// Override weights are compact: only the input columns of active heads
/// (attn.out) or active channels (fc2), in order, so they require the
/// matching mask.
struct BlockRoute {
    const float* attn_out_weight = nullptr;
    const float* fc2_weight = nullptr;
    const std::uint8_t* head_active = nullptr;
    const std::uint8_t* channel_active = nullptr;
    bool skip = false;
};

struct ForwardPlan {
    std::vector<BlockRoute> blocks;
};

namespace detail {

inline float dot(const float* a, const float* b, int n) {
    float s = 0.0f;
#pragma omp simd reduction(+ : s)
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(float alpha, const float* x, float* y, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[t][o] = b[o] + W[o] . x[t] for every token t. W is transposed once so the
// inner loop is a contiguous axpy over outputs.
inline void linear(const float* x, int tokens, int in, const float* w, const float* b, int out, float* y) {
    thread_local std::vector<float> wt_buf;
    wt_buf.resize(static_cast<std::size_t>(in * out));
    float* wt = wt_buf.data();
    for (int o = 0; o < out; ++o)
        for (int i = 0; i < in; ++i) wt[i * out + o] = w[o * in + i];
    for (int t = 0; t < tokens; ++t) {
        float* yt = y + t * out;
        const float* xt = x + t * in;
        for (int o = 0; o < out; ++o) yt[o] = b[o];
        for (int i = 0; i < in; ++i) axpy(xt[i], wt + i * out, yt, out);
    }
}

// Same as linear, restricted to the input columns listed in `cols`; w is
// compact (out x cols.size()). Equals linear() on the full-width matrix
// whose other columns are zero.
inline void linear_cols(const float* x, int tokens, int in, const float* w, const std::vector<int>& cols, const float* b,
                        int out, float* y) {
    const int k = static_cast<int>(cols.size());
    thread_local std::vector<float> wt_buf;
    wt_buf.resize(static_cast<std::size_t>(k * out));
    float* wt = wt_buf.data();
    for (int o = 0; o < out; ++o)
        for (int i = 0; i < k; ++i) wt[i * out + o] = w[o * k + i];
    for (int t = 0; t < tokens; ++t) {
        float* yt = y + t * out;
        const float* xt = x + t * in;
        for (int o = 0; o < out; ++o) yt[o] = b[o];
        for (int i = 0; i < k; ++i) axpy(xt[cols[static_cast<std::size_t>(i)]], wt + i * out, yt, out);
    }
}

// exp via Cody-Waite range reduction and a degree-6 polynomial (relative
// error ~2e-7); unlike libm expf it vectorizes.
inline float exp_approx(float x) {
    x = std::min(88.0f, std::max(-87.0f, x));
    constexpr float kLog2e = 1.44269504088896341f;
    constexpr float kLn2Hi = 0.693145751953125f, kLn2Lo = 1.428606765330187045e-6f;
    constexpr float kRound = 12582912.0f;  // 1.5 * 2^23
    const float k = (x * kLog2e + kRound) - kRound;
    const float r = (x - k * kLn2Hi) - k * kLn2Lo;
    float p = 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;
    const int e = static_cast<int>(k) + 127;
    return p * std::bit_cast<float>(e << 23);
}

inline constexpr float kLayerNormEps = 1e-5f;

// Affine-free layer norm per token; stores the reciprocal std for backward.
inline void layer_norm(const float* x, int tokens, int dim, float* y, float* rstd) {
    for (int t = 0; t < tokens; ++t) {
        const float* xt = x + t * dim;
        float* yt = y + t * dim;
        float mean = 0.0f;
        for (int i = 0; i < dim; ++i) mean += xt[i];
        mean /= static_cast<float>(dim);
        float var = 0.0f;
        for (int i = 0; i < dim; ++i) var += (xt[i] - mean) * (xt[i] - mean);
        var /= static_cast<float>(dim);
        const float r = 1.0f / std::sqrt(var + kLayerNormEps);
        rstd[t] = r;
        for (int i = 0; i < dim; ++i) yt[i] = (xt[i] - mean) * r;
    }
}

inline void layer_norm_backward(const float* y, const float* rstd, const float* dy, int tokens, int dim, float* dx) {
    for (int t = 0; t < tokens; ++t) {
        const float* yt = y + t * dim;
        const float* dyt = dy + t * dim;
        float* dxt = dx + t * dim;
        float mean_dy = 0.0f, mean_dyy = 0.0f;
        for (int i = 0; i < dim; ++i) {
            mean_dy += dyt[i];
            mean_dyy += dyt[i] * yt[i];
        }
        mean_dy /= static_cast<float>(dim);
        mean_dyy /= static_cast<float>(dim);
        for (int i = 0; i < dim; ++i) dxt[i] += rstd[t] * (dyt[i] - mean_dy - yt[i] * mean_dyy);
    }
}

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

inline float fast_tanh(float z) {
    return 1.0f - 2.0f / (exp_approx(2.0f * z) + 1.0f);
}

inline float gelu(float x) {
    return 0.5f * x * (1.0f + fast_tanh(kGeluC * (x + 0.044715f * x * x * x)));
}

inline float gelu_grad(float x) {
    const float th = fast_tanh(kGeluC * (x + 0.044715f * x * x * x));
    return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
}

}  // namespace detail


/// Everything a batched forward pass produces, kept for backward and for
/// activation capture. Token-major buffers hold batch * tokens rows.
struct BlockCache {
    std::vector<float> h_in;    // rows x embed
    std::vector<float> a;       // LN1 output, input of attn.qkv
    std::vector<float> rstd1;
    std::vector<float> qkv;     // rows x 3*embed
    std::vector<float> probs;   // batch x heads x tokens x tokens
    std::vector<float> concat;  // input of attn.out
    std::vector<float> h_mid;
    std::vector<float> m;       // LN2 output, input of mlp.fc1
    std::vector<float> rstd2;
    std::vector<float> u;       // fc1 pre-activation
    std::vector<float> g;       // input of mlp.fc2
    std::vector<float> h_out;
    bool skipped = false;
};

struct ForwardCache {
    int batch = 0;
    std::vector<int> labels;
    std::vector<float> tokens_in;  // rows x patch_dim
    std::vector<float> time_feat;  // batch x embed sinusoid
    std::vector<float> h0;
    std::vector<BlockCache> blocks;
    std::vector<float> z;  // final LN output
    std::vector<float> rstd_f;
    std::vector<float> eps;  // batch x pixels prediction
};

class DenoiserModel {
public:
    DenoiserModel() = default;
    explicit DenoiserModel(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const int e = cfg_.embed;
        add("patch.w", e, cfg_.patch_dim());
        add("patch.b", 1, e);
        add("pos", cfg_.tokens(), e);
        add("time.w", e, e);
        add("time.b", 1, e);
        add("class", cfg_.classes, e);
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string p = "blocks." + std::to_string(b) + ".";
            add(p + "attn.qkv.w", 3 * e, e);
            add(p + "attn.qkv.b", 1, 3 * e);
            add(p + "attn.out.w", e, e);
            add(p + "attn.out.b", 1, e);
            add(p + "mlp.fc1.w", cfg_.hidden, e);
            add(p + "mlp.fc1.b", 1, cfg_.hidden);
            add(p + "mlp.fc2.w", e, cfg_.hidden);
            add(p + "mlp.fc2.b", 1, e);
        }
        add("out.w", cfg_.patch_dim(), e);
        add("out.b", 1, cfg_.patch_dim());
    }

    /// Random initialization, deterministic in the seed.
    void init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<float> normal(0.0f, 1.0f);
        for (auto& t : params_) {
            const bool bias = t.rows == 1 && t.name.ends_with(".b");
            float stddev = bias ? 0.0f : 1.0f / std::sqrt(static_cast<float>(t.cols));
            if (t.name == "pos" || t.name == "class") stddev = 0.1f;
            if (t.name == "out.w") stddev *= 0.1f;
            for (auto& v : t.w) v = stddev == 0.0f ? 0.0f : stddev * normal(rng);
        }
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    std::vector<Tensor>& params() noexcept { return params_; }
    const std::vector<Tensor>& params() const noexcept { return params_; }

    std::size_t param_count() const noexcept {
        std::size_t n = 0;
        for (const auto& t : params_) n += t.size();
        return n;
    }

    Tensor& tensor(const std::string& name) { return params_[find(name)]; }
    const Tensor& tensor(const std::string& name) const { return params_[find(name)]; }

    /// Weight matrix of a prunable layer (rows = outputs, cols = inputs).
    Tensor& layer_weight(LayerId id) { return params_[layer_tensor_index(id)]; }
    const Tensor& layer_weight(LayerId id) const { return params_[layer_tensor_index(id)]; }
    Tensor& layer_bias(LayerId id) { return params_[layer_tensor_index(id) + 1]; }
    const Tensor& layer_bias(LayerId id) const { return params_[layer_tensor_index(id) + 1]; }

    std::vector<LayerId> layer_ids() const {
        std::vector<LayerId> ids;
        for (int b = 0; b < cfg_.blocks; ++b)
            for (int k = 0; k < kLayersPerBlock; ++k) ids.push_back({b, static_cast<LayerKind>(k)});
        return ids;
    }

    /// Noise prediction for a batch of images (batch x pixels, row-major).
    /// `plan` may be null for the dense model.
    void forward(std::span<const float> images, std::span<const int> timesteps, std::span<const int> labels,
                 const ForwardPlan* plan, ForwardCache& c) const {
        const int B = static_cast<int>(labels.size());
        const int T = cfg_.tokens(), E = cfg_.embed, P = cfg_.patch_dim(), H = cfg_.heads;
        const int D = cfg_.head_dim(), F = cfg_.hidden;
        const int R = B * T;
        if (B == 0) throw Error(ErrorKind::InvalidShape, "empty batch");
        if (static_cast<int>(images.size()) != B * cfg_.pixels() || static_cast<int>(timesteps.size()) != B)
            throw Error(ErrorKind::InvalidShape, "batch shapes do not match model config");
        for (int l : labels)
            if (l < 0 || l >= cfg_.classes) throw Error(ErrorKind::InvalidInput, "label out of range");
        if (plan && static_cast<int>(plan->blocks.size()) != cfg_.blocks)
            throw Error(ErrorKind::InvalidShape, "forward plan block count mismatch");
        c.batch = B;
        c.labels.assign(labels.begin(), labels.end());

        c.tokens_in.resize(static_cast<std::size_t>(R * P));
        for (int b = 0; b < B; ++b) patchify(images.subspan(static_cast<std::size_t>(b * cfg_.pixels()), static_cast<std::size_t>(cfg_.pixels())), &c.tokens_in[static_cast<std::size_t>(b * T * P)]);

        c.time_feat.resize(static_cast<std::size_t>(B * E));
        for (int b = 0; b < B; ++b) time_features(timesteps[static_cast<std::size_t>(b)], &c.time_feat[static_cast<std::size_t>(b * E)]);
        std::vector<float> temb(static_cast<std::size_t>(B * E));
        detail::linear(c.time_feat.data(), B, E, p(kTimeW), p(kTimeB), E, temb.data());

        c.h0.resize(static_cast<std::size_t>(R * E));
        detail::linear(c.tokens_in.data(), R, P, p(kPatchW), p(kPatchB), E, c.h0.data());
        for (int b = 0; b < B; ++b) {
            const float* cls = p(kClass) + labels[static_cast<std::size_t>(b)] * E;
            const float* te = &temb[static_cast<std::size_t>(b * E)];
            for (int tk = 0; tk < T; ++tk) {
                float* h = &c.h0[static_cast<std::size_t>((b * T + tk) * E)];
                const float* pos = p(kPos) + tk * E;
                for (int i = 0; i < E; ++i) h[i] += pos[i] + te[i] + cls[i];
            }
        }

        c.blocks.resize(static_cast<std::size_t>(cfg_.blocks));
        const std::vector<float>* h = &c.h0;
        const float scale = 1.0f / std::sqrt(static_cast<float>(D));
        std::vector<float> kt(static_cast<std::size_t>(D * T));
        std::vector<int> cols;
        for (int blk = 0; blk < cfg_.blocks; ++blk) {
            BlockCache& bc = c.blocks[static_cast<std::size_t>(blk)];
            const BlockRoute* route = plan ? &plan->blocks[static_cast<std::size_t>(blk)] : nullptr;
            bc.h_in = *h;
            bc.skipped = route && route->skip;
            if (bc.skipped) {
                bc.h_out = bc.h_in;
                h = &bc.h_out;
                continue;
            }
            const BlockParams bp = block_params(blk);
            const float* out_w = route && route->attn_out_weight ? route->attn_out_weight : bp.out_w;
            const float* fc2_w = route && route->fc2_weight ? route->fc2_weight : bp.fc2_w;
            const std::uint8_t* head_on = route ? route->head_active : nullptr;
            const std::uint8_t* chan_on = route ? route->channel_active : nullptr;
            if ((route && route->attn_out_weight && !head_on) || (route && route->fc2_weight && !chan_on))
                throw Error(ErrorKind::InvalidInput, "compact override weights need an activity mask");

            bc.a.resize(static_cast<std::size_t>(R * E));
            bc.rstd1.resize(static_cast<std::size_t>(R));
            detail::layer_norm(bc.h_in.data(), R, E, bc.a.data(), bc.rstd1.data());
            bc.qkv.resize(static_cast<std::size_t>(R * 3 * E));
            detail::linear(bc.a.data(), R, E, bp.qkv_w, bp.qkv_b, 3 * E, bc.qkv.data());

            bc.probs.assign(static_cast<std::size_t>(B * H * T * T), 0.0f);
            bc.concat.assign(static_cast<std::size_t>(R * E), 0.0f);
            for (int b = 0; b < B; ++b) {
                const float* qkv = &bc.qkv[static_cast<std::size_t>(b * T * 3 * E)];
                for (int hd = 0; hd < H; ++hd) {
                    if (head_on && !head_on[hd]) continue;
                    for (int j = 0; j < T; ++j)
                        for (int d = 0; d < D; ++d) kt[static_cast<std::size_t>(d * T + j)] = qkv[j * 3 * E + E + hd * D + d];
                    for (int i = 0; i < T; ++i) {
                        const float* q = qkv + i * 3 * E + hd * D;
                        float* prow = &bc.probs[static_cast<std::size_t>(((b * H + hd) * T + i) * T)];
                        for (int d = 0; d < D; ++d) detail::axpy(q[d] * scale, &kt[static_cast<std::size_t>(d * T)], prow, T);
                        float mx = prow[0];
                        for (int j = 1; j < T; ++j) mx = std::max(mx, prow[j]);
                        float sum = 0.0f;
#pragma omp simd
                        for (int j = 0; j < T; ++j) prow[j] = detail::exp_approx(prow[j] - mx);
                        for (int j = 0; j < T; ++j) sum += prow[j];
                        const float inv = 1.0f / sum;
                        float* out = &bc.concat[static_cast<std::size_t>((b * T + i) * E + hd * D)];
                        for (int j = 0; j < T; ++j) {
                            prow[j] *= inv;
                            detail::axpy(prow[j], qkv + j * 3 * E + 2 * E + hd * D, out, D);
                        }
                    }
                }
            }
            bc.h_mid.resize(static_cast<std::size_t>(R * E));
            if (out_w == bp.out_w) {
                detail::linear(bc.concat.data(), R, E, out_w, bp.out_b, E, bc.h_mid.data());
            } else {
                cols.clear();
                for (int hd = 0; hd < H; ++hd)
                    if (head_on[hd])
                        for (int d = 0; d < D; ++d) cols.push_back(hd * D + d);
                detail::linear_cols(bc.concat.data(), R, E, out_w, cols, bp.out_b, E, bc.h_mid.data());
            }
            for (std::size_t i = 0; i < bc.h_mid.size(); ++i) bc.h_mid[i] += bc.h_in[i];

            bc.m.resize(static_cast<std::size_t>(R * E));
            bc.rstd2.resize(static_cast<std::size_t>(R));
            detail::layer_norm(bc.h_mid.data(), R, E, bc.m.data(), bc.rstd2.data());
            bc.u.resize(static_cast<std::size_t>(R * F));
            bc.g.resize(static_cast<std::size_t>(R * F));
            detail::linear(bc.m.data(), R, E, bp.fc1_w, bp.fc1_b, F, bc.u.data());
            for (int r = 0; r < R; ++r) {
                float* ur = &bc.u[static_cast<std::size_t>(r * F)];
                float* gr = &bc.g[static_cast<std::size_t>(r * F)];
                if (chan_on)
                    for (int o = 0; o < F; ++o)
                        if (!chan_on[o]) ur[o] = 0.0f;
#pragma omp simd
                for (int o = 0; o < F; ++o) gr[o] = detail::gelu(ur[o]);
            }
            bc.h_out.resize(static_cast<std::size_t>(R * E));
            if (fc2_w == bp.fc2_w) {
                detail::linear(bc.g.data(), R, F, fc2_w, bp.fc2_b, E, bc.h_out.data());
            } else {
                cols.clear();
                for (int o = 0; o < F; ++o)
                    if (chan_on[o]) cols.push_back(o);
                detail::linear_cols(bc.g.data(), R, F, fc2_w, cols, bp.fc2_b, E, bc.h_out.data());
            }
            for (std::size_t i = 0; i < bc.h_out.size(); ++i) bc.h_out[i] += bc.h_mid[i];
            h = &bc.h_out;
        }

        c.z.resize(static_cast<std::size_t>(R * E));
        c.rstd_f.resize(static_cast<std::size_t>(R));
        detail::layer_norm(h->data(), R, E, c.z.data(), c.rstd_f.data());
        std::vector<float> out_tokens(static_cast<std::size_t>(R * P));
        detail::linear(c.z.data(), R, E, p(out_w_index()), p(out_w_index() + 1), P, out_tokens.data());
        c.eps.resize(static_cast<std::size_t>(B * cfg_.pixels()));
        for (int b = 0; b < B; ++b)
            unpatchify(&out_tokens[static_cast<std::size_t>(b * T * P)], std::span<float>(c.eps).subspan(static_cast<std::size_t>(b * cfg_.pixels()), static_cast<std::size_t>(cfg_.pixels())));
    }

    std::vector<float> predict(std::span<const float> image, int t, int label, const ForwardPlan* plan = nullptr) const {
        ForwardCache c;
        const int ts[1] = {t};
        const int ls[1] = {label};
        forward(image, ts, ls, plan, c);
        return c.eps;
    }

    /// Accumulates d(loss)/d(params) into grads (same layout as params())
    /// given d(loss)/d(eps) for the cached batch. Dense forward caches only.
    void backward(const ForwardCache& c, std::span<const float> d_eps, std::vector<Tensor>& grads) const {
        const int B = c.batch;
        const int T = cfg_.tokens(), E = cfg_.embed, P = cfg_.patch_dim(), H = cfg_.heads;
        const int D = cfg_.head_dim(), F = cfg_.hidden;
        const int R = B * T;
        auto g = [&](std::size_t idx) { return grads[idx].w.data(); };

        std::vector<float> d_out(static_cast<std::size_t>(R * P));
        for (int b = 0; b < B; ++b)
            patchify(d_eps.subspan(static_cast<std::size_t>(b * cfg_.pixels()), static_cast<std::size_t>(cfg_.pixels())), &d_out[static_cast<std::size_t>(b * T * P)]);
        std::vector<float> dz(static_cast<std::size_t>(R * E), 0.0f);
        linear_backward(c.z.data(), R, E, p(out_w_index()), P, d_out.data(), g(out_w_index()), g(out_w_index() + 1), dz.data());
        std::vector<float> dh(static_cast<std::size_t>(R * E), 0.0f);
        detail::layer_norm_backward(c.z.data(), c.rstd_f.data(), dz.data(), R, E, dh.data());

        const float scale = 1.0f / std::sqrt(static_cast<float>(D));
        std::vector<float> dp(static_cast<std::size_t>(T));
        for (int blk = cfg_.blocks - 1; blk >= 0; --blk) {
            const BlockCache& bc = c.blocks[static_cast<std::size_t>(blk)];
            if (bc.skipped) continue;
            const BlockParams bp = block_params(blk);
            const std::size_t base = kBlockBase + static_cast<std::size_t>(blk) * kTensorsPerBlock;

            // MLP: h_out = h_mid + fc2(gelu(fc1(LN(h_mid))))
            std::vector<float> dgv(static_cast<std::size_t>(R * F), 0.0f);
            linear_backward(bc.g.data(), R, F, bp.fc2_w, E, dh.data(), g(base + 6), g(base + 7), dgv.data());
            for (std::size_t i = 0; i < dgv.size(); ++i) dgv[i] *= detail::gelu_grad(bc.u[i]);
            std::vector<float> dm(static_cast<std::size_t>(R * E), 0.0f);
            linear_backward(bc.m.data(), R, E, bp.fc1_w, F, dgv.data(), g(base + 4), g(base + 5), dm.data());
            std::vector<float> dh_mid = dh;
            detail::layer_norm_backward(bc.m.data(), bc.rstd2.data(), dm.data(), R, E, dh_mid.data());

            // Attention: h_mid = h_in + out(attn(qkv(LN(h_in))))
            std::vector<float> dconcat(static_cast<std::size_t>(R * E), 0.0f);
            linear_backward(bc.concat.data(), R, E, bp.out_w, E, dh_mid.data(), g(base + 2), g(base + 3), dconcat.data());
            std::vector<float> dqkv(static_cast<std::size_t>(R * 3 * E), 0.0f);
            for (int b = 0; b < B; ++b) {
                const float* qkv = &bc.qkv[static_cast<std::size_t>(b * T * 3 * E)];
                float* dq_base = &dqkv[static_cast<std::size_t>(b * T * 3 * E)];
                for (int hd = 0; hd < H; ++hd) {
                    for (int i = 0; i < T; ++i) {
                        const float* prow = &bc.probs[static_cast<std::size_t>(((b * H + hd) * T + i) * T)];
                        const float* dci = &dconcat[static_cast<std::size_t>((b * T + i) * E + hd * D)];
                        float dot_pdp = 0.0f;
                        for (int j = 0; j < T; ++j) {
                            dp[static_cast<std::size_t>(j)] = detail::dot(dci, qkv + j * 3 * E + 2 * E + hd * D, D);
                            dot_pdp += prow[j] * dp[static_cast<std::size_t>(j)];
                            detail::axpy(prow[j], dci, dq_base + j * 3 * E + 2 * E + hd * D, D);
                        }
                        const float* q = qkv + i * 3 * E + hd * D;
                        float* dq = dq_base + i * 3 * E + hd * D;
                        for (int j = 0; j < T; ++j) {
                            const float ds = prow[j] * (dp[static_cast<std::size_t>(j)] - dot_pdp) * scale;
                            detail::axpy(ds, qkv + j * 3 * E + E + hd * D, dq, D);
                            detail::axpy(ds, q, dq_base + j * 3 * E + E + hd * D, D);
                        }
                    }
                }
            }
            std::vector<float> da(static_cast<std::size_t>(R * E), 0.0f);
            linear_backward(bc.a.data(), R, E, bp.qkv_w, 3 * E, dqkv.data(), g(base + 0), g(base + 1), da.data());
            dh = std::move(dh_mid);
            detail::layer_norm_backward(bc.a.data(), bc.rstd1.data(), da.data(), R, E, dh.data());
        }

        std::vector<float> dtok(static_cast<std::size_t>(R * P), 0.0f);
        linear_backward(c.tokens_in.data(), R, P, p(kPatchW), E, dh.data(), g(kPatchW), g(kPatchB), dtok.data());
        float* dpos = g(kPos);
        std::vector<float> dtemb(static_cast<std::size_t>(B * E), 0.0f);
        for (int b = 0; b < B; ++b) {
            float* dcls = g(kClass) + c.labels[static_cast<std::size_t>(b)] * E;
            float* dte = &dtemb[static_cast<std::size_t>(b * E)];
            for (int tk = 0; tk < T; ++tk)
                for (int i = 0; i < E; ++i) {
                    const float v = dh[static_cast<std::size_t>((b * T + tk) * E + i)];
                    dpos[tk * E + i] += v;
                    dcls[i] += v;
                    dte[i] += v;
                }
        }
        std::vector<float> dfeat(static_cast<std::size_t>(B * E), 0.0f);
        linear_backward(c.time_feat.data(), B, E, p(kTimeW), E, dtemb.data(), g(kTimeW), g(kTimeB), dfeat.data());
    }

    std::vector<Tensor> zero_like() const {
        std::vector<Tensor> z = params_;
        for (auto& t : z) std::fill(t.w.begin(), t.w.end(), 0.0f);
        return z;
    }

    /// Sinusoidal timestep features: sin(t f_i) then cos(t f_i), f_i = 10000^(-i/half).
    void time_features(int t, float* out) const {
        const int half = cfg_.embed / 2;
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            out[i] = static_cast<float>(std::sin(t * freq));
            out[half + i] = static_cast<float>(std::cos(t * freq));
        }
    }

    std::size_t find(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return i;
        throw Error(ErrorKind::InvalidInput, "unknown tensor " + name);
    }

    friend bool operator==(const DenoiserModel& a, const DenoiserModel& b) {
        return a.cfg_ == b.cfg_ && a.params_ == b.params_;
    }

private:
    struct BlockParams {
        const float *qkv_w, *qkv_b, *out_w, *out_b, *fc1_w, *fc1_b, *fc2_w, *fc2_b;
    };

    // Registry order fixed by the constructor.
    static constexpr std::size_t kPatchW = 0, kPatchB = 1, kPos = 2, kTimeW = 3, kTimeB = 4, kClass = 5;
    static constexpr std::size_t kBlockBase = 6;
    static constexpr std::size_t kTensorsPerBlock = 8;
    std::size_t out_w_index() const { return kBlockBase + static_cast<std::size_t>(cfg_.blocks) * kTensorsPerBlock; }

    const float* p(std::size_t idx) const { return params_[idx].w.data(); }

    BlockParams block_params(int b) const {
        const std::size_t base = kBlockBase + static_cast<std::size_t>(b) * kTensorsPerBlock;
        auto q = [&](std::size_t k) { return params_[base + k].w.data(); };
        return {q(0), q(1), q(2), q(3), q(4), q(5), q(6), q(7)};
    }

    std::size_t layer_tensor_index(LayerId id) const {
        if (id.block < 0 || id.block >= cfg_.blocks) throw Error(ErrorKind::InvalidInput, "layer block out of range");
        return kBlockBase + static_cast<std::size_t>(id.block) * kTensorsPerBlock + 2 * static_cast<std::size_t>(id.kind);
    }

    void patchify(std::span<const float> image, float* tokens) const {
        const int S = cfg_.image_side, ps = cfg_.patch, P = cfg_.patch_dim(), per_row = S / ps;
        for (int tk = 0; tk < cfg_.tokens(); ++tk) {
            const int py = tk / per_row, px = tk % per_row;
            for (int iy = 0; iy < ps; ++iy)
                for (int ix = 0; ix < ps; ++ix)
                    tokens[tk * P + iy * ps + ix] = image[static_cast<std::size_t>((py * ps + iy) * S + px * ps + ix)];
        }
    }

    void unpatchify(const float* tokens, std::span<float> image) const {
        const int S = cfg_.image_side, ps = cfg_.patch, P = cfg_.patch_dim(), per_row = S / ps;
        for (int tk = 0; tk < cfg_.tokens(); ++tk) {
            const int py = tk / per_row, px = tk % per_row;
            for (int iy = 0; iy < ps; ++iy)
                for (int ix = 0; ix < ps; ++ix)
                    image[static_cast<std::size_t>((py * ps + iy) * S + px * ps + ix)] = tokens[tk * P + iy * ps + ix];
        }
    }

    void add(std::string name, int rows, int cols) {
        params_.push_back({std::move(name), rows, cols, std::vector<float>(static_cast<std::size_t>(rows * cols), 0.0f)});
    }

    // y = x W^T + b; accumulates dW, db and dx.
    static void linear_backward(const float* x, int rows, int in, const float* w, int out, const float* dy,
                                float* dw, float* db, float* dx) {
        for (int t = 0; t < rows; ++t) {
            const float* xt = x + t * in;
            const float* dyt = dy + t * out;
            float* dxt = dx + t * in;
            for (int o = 0; o < out; ++o) {
                const float d = dyt[o];
                if (d == 0.0f) continue;
                db[o] += d;
                detail::axpy(d, xt, dw + o * in, in);
                detail::axpy(d, w + o * in, dxt, in);
            }
        }
    }

    ModelConfig cfg_;
    std::vector<Tensor> params_;
};

}  // namespace diffes::toydiff
