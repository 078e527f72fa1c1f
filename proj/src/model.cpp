#include "slamformer/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include "slamformer/tensor_ops.hpp"

namespace slamformer {

void ModelConfig::validate() const {
    if (layers < 1) throw Error::config("ModelConfig: need at least one layer");
    if (d_model < 2) throw Error::config("ModelConfig: d_model too small");
    if (heads < 1 || d_model % heads != 0)
        throw Error::config("ModelConfig: d_model must be divisible by heads");
    if (patch < 1 || image_h % patch != 0 || image_w % patch != 0)
        throw Error::config("ModelConfig: image dims must be divisible by patch size");
    if (registers < 1) throw Error::config("ModelConfig: need at least one register token");
}

ImageFrame make_image_frame(int h, int w, std::vector<float> rgb, double timestamp,
                            int frame_index) {
    if (static_cast<size_t>(h) * w * 3 != rgb.size())
        throw Error::dimension("make_image_frame: pixel buffer size mismatch");
    for (float v : rgb)
        if (!(v >= 0.0f && v <= 1.0f))
            throw Error::contract("make_image_frame: pixel outside [0,1]");
    return ImageFrame{h, w, std::move(rgb), timestamp, frame_index};
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rows(matmul(x, w), b);
}

// Column range extraction through a constant selection matrix.
Tensor take_cols(const Tensor& x, int c0, int count) {
    const int c = x.cols();
    std::vector<scalar> sel(static_cast<size_t>(c) * count, scalar(0));
    for (int j = 0; j < count; ++j) sel[static_cast<size_t>(c0 + j) * count + j] = scalar(1);
    return matmul(x, Tensor::from_data({c, count}, std::move(sel)));
}

Tensor mean_rows(const Tensor& x) {
    const int r = x.rows();
    return matmul(Tensor::full({1, r}, static_cast<scalar>(1.0 / r)), x);
}

Tensor randn_w(Rng& rng, int rows, int cols, double stddev) {
    return Tensor::randn({rows, cols}, rng, stddev);
}

// Intra-frame attention sub-block: projections + masked MHA + output proj.
Tensor intra_attention(const Tensor& y, const LayerWeights& L, int heads,
                       const BoolMask& token_mask) {
    const Tensor q = linear(y, L.qi, L.qi_b);
    const Tensor k = linear(y, L.ki, L.ki_b);
    const Tensor v = linear(y, L.vi, L.vi_b);
    const Tensor att = multihead_attention_tokens(q, k, v, heads, token_mask);
    return linear(att, L.oi, L.oi_b);
}

}  // namespace

SlamFormerModel::SlamFormerModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int d = cfg_.d_model;
    const double s = 0.02;
    const double head_s = 0.05;

    w_.patch_w = randn_w(rng, cfg_.patch * cfg_.patch * 3, d, s);
    w_.patch_b = Tensor::zeros({1, d});
    w_.pos_emb = randn_w(rng, cfg_.patch_tokens(), d, s);
    w_.registers = randn_w(rng, cfg_.registers, d, s);
    w_.reentry_w = randn_w(rng, d, d, s);
    w_.reentry_b = Tensor::zeros({1, d});
    w_.type_emb = randn_w(rng, 1, d, s);

    w_.layers.resize(static_cast<size_t>(cfg_.layers));
    for (auto& L : w_.layers) {
        L.ln1_g = Tensor::full({1, d}, 1);
        L.ln1_b = Tensor::zeros({1, d});
        L.qi = randn_w(rng, d, d, s); L.ki = randn_w(rng, d, d, s);
        L.vi = randn_w(rng, d, d, s); L.oi = randn_w(rng, d, d, s);
        L.qi_b = Tensor::zeros({1, d}); L.ki_b = Tensor::zeros({1, d});
        L.vi_b = Tensor::zeros({1, d}); L.oi_b = Tensor::zeros({1, d});
        L.ln2_g = Tensor::full({1, d}, 1);
        L.ln2_b = Tensor::zeros({1, d});
        L.qx = randn_w(rng, d, d, s); L.kx = randn_w(rng, d, d, s);
        L.vx = randn_w(rng, d, d, s); L.ox = randn_w(rng, d, d, s);
        L.qx_b = Tensor::zeros({1, d}); L.kx_b = Tensor::zeros({1, d});
        L.vx_b = Tensor::zeros({1, d}); L.ox_b = Tensor::zeros({1, d});
        L.ln3_g = Tensor::full({1, d}, 1);
        L.ln3_b = Tensor::zeros({1, d});
        L.m1 = randn_w(rng, d, 4 * d, s); L.m1_b = Tensor::zeros({1, 4 * d});
        L.m2 = randn_w(rng, 4 * d, d, s); L.m2_b = Tensor::zeros({1, d});
    }
    w_.lnf_g = Tensor::full({1, d}, 1);
    w_.lnf_b = Tensor::zeros({1, d});

    w_.pose_w1 = randn_w(rng, d, d, head_s);
    w_.pose_b1 = Tensor::zeros({1, d});
    w_.pose_w2 = randn_w(rng, d, 7, head_s);
    // Identity-quaternion bias keeps untrained poses near the identity.
    w_.pose_b2 = Tensor::from_data({1, 7}, {1, 0, 0, 0, 0, 0, 0});

    const int pm_out = cfg_.patch * cfg_.patch * 4;
    w_.pmap_w1 = randn_w(rng, d, d, head_s);
    w_.pmap_b1 = Tensor::zeros({1, d});
    w_.pmap_w2 = randn_w(rng, d, pm_out, head_s);
    w_.pmap_b2 = Tensor::zeros({1, pm_out});
}

SlamFormerModel::SlamFormerModel(ModelConfig cfg, ModelWeights weights)
    : cfg_(cfg), w_(std::move(weights)) {
    cfg_.validate();
}

FrameTokens SlamFormerModel::encode_image(const ImageFrame& frame) const {
    if (frame.h != cfg_.image_h || frame.w != cfg_.image_w)
        throw Error::config("encode_image: frame dims do not match model config");
    const int p = cfg_.patch;
    const int gw = cfg_.grid_w(), gh = cfg_.grid_h();
    const int flat = p * p * 3;
    std::vector<scalar> patches(static_cast<size_t>(gh) * gw * flat);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            const size_t base = (static_cast<size_t>(gy) * gw + gx) * flat;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < 3; ++c) {
                        const int y = gy * p + py, x = gx * p + px;
                        patches[base + (static_cast<size_t>(py) * p + px) * 3 + c] =
                            static_cast<scalar>(frame.rgb[(static_cast<size_t>(y) * frame.w + x) * 3 + c]);
                    }
        }
    const Tensor X = Tensor::from_data({gh * gw, flat}, std::move(patches));
    Tensor tok = add(linear(X, w_.patch_w, w_.patch_b), w_.pos_emb);
    tok = concat_rows({tok, w_.registers});
    return FrameTokens{std::move(tok), frame.frame_index};
}

FrameTokens SlamFormerModel::reenter_map_tokens(const MapTokens& m) const {
    if (m.tokens.cols() != cfg_.d_model)
        throw Error::dimension("reenter_map_tokens: d_model mismatch");
    if (!cfg_.token_type_embedding) return FrameTokens{m.tokens, m.frame_index};
    Tensor tok = add_rows(linear(m.tokens, w_.reentry_w, w_.reentry_b), w_.type_emb);
    return FrameTokens{std::move(tok), m.frame_index};
}

BackboneResult SlamFormerModel::backbone_forward(const std::vector<FrameTokens>& frames,
                                                 const AttentionMask& mask,
                                                 const KVCache* cache) const {
    if (frames.empty()) throw Error::contract("backbone_forward: no frames");
    const int t = cfg_.tokens_per_frame();
    for (const auto& f : frames)
        if (f.tokens.rows() != t || f.tokens.cols() != cfg_.d_model)
            throw Error::contract("backbone_forward: token block shape mismatch");
    const int n = static_cast<int>(frames.size());
    const bool incremental = cache != nullptr;
    if (incremental) {
        if (n != 1) throw Error::contract("backbone_forward: incremental mode takes one new frame");
        if (cache->layer_count() != cfg_.layers)
            throw Error::contract("backbone_forward: cache layer count mismatch");
    } else {
        if (mask.layout().num_frames != n || mask.layout().tokens_per_frame != t)
            throw Error::contract("backbone_forward: mask layout does not match input");
    }

    // Concatenated token matrix; per-frame structure is recovered by row
    // ranges. Intra-frame attention uses a block-diagonal token mask.
    std::vector<Tensor> xs;
    xs.reserve(frames.size());
    for (const auto& f : frames) xs.push_back(f.tokens);
    Tensor x = n == 1 ? xs.front() : concat_rows(xs);

    BoolMask intra = BoolMask::all(n * t, n * t, false);
    for (int f = 0; f < n; ++f)
        for (int a = 0; a < t; ++a)
            for (int b = 0; b < t; ++b) intra.set(f * t + a, f * t + b, true);
    const BoolMask inter = incremental ? BoolMask{} : mask.expand_tokens();

    std::vector<std::vector<KVBlock>> blocks(static_cast<size_t>(n));
    for (auto& b : blocks) b.reserve(static_cast<size_t>(cfg_.layers));

    for (int l = 0; l < cfg_.layers; ++l) {
        const auto& L = w_.layers[static_cast<size_t>(l)];
        {
            const Tensor y = layer_norm(x, L.ln1_g, L.ln1_b);
            x = add(x, intra_attention(y, L, cfg_.heads, intra));
        }
        {
            const Tensor y = layer_norm(x, L.ln2_g, L.ln2_b);
            const Tensor q = linear(y, L.qx, L.qx_b);
            const Tensor k = linear(y, L.kx, L.kx_b);
            const Tensor v = linear(y, L.vx, L.vx_b);
            // K/V entering inter-frame attention are what the cache stores.
            for (int f = 0; f < n; ++f)
                blocks[static_cast<size_t>(f)].push_back(
                    KVBlock{slice_rows(k, f * t, t).detached(), slice_rows(v, f * t, t).detached()});
            Tensor att;
            if (incremental) {
                KVBlock self{slice_rows(k, 0, t), slice_rows(v, 0, t)};
                att = incremental_attention(q, *cache, l, self, cfg_.heads);
            } else {
                att = multihead_attention_tokens(q, k, v, cfg_.heads, inter);
            }
            x = add(x, linear(att, L.ox, L.ox_b));
        }
        {
            const Tensor y = layer_norm(x, L.ln3_g, L.ln3_b);
            x = add(x, linear(gelu(linear(y, L.m1, L.m1_b)), L.m2, L.m2_b));
        }
    }
    x = layer_norm(x, w_.lnf_g, w_.lnf_b);

    BackboneResult out;
    out.map_tokens.reserve(frames.size());
    for (int f = 0; f < n; ++f)
        out.map_tokens.push_back(MapTokens{n == 1 ? x : slice_rows(x, f * t, t),
                                           frames[static_cast<size_t>(f)].frame_index,
                                           TokenOrigin::frontend});
    out.blocks = std::move(blocks);
    return out;
}

// Intra-frame attention helper: projections + masked MHA + output projection.
Tensor SlamFormerModel::multihead_attention_block(const Tensor& y, const LayerWeights& L,
                                                  const BoolMask& token_mask) const {
    const Tensor q = linear(y, L.qi, L.qi_b);
    const Tensor k = linear(y, L.ki, L.ki_b);
    const Tensor v = linear(y, L.vi, L.vi_b);
    const Tensor att = masked_mha_tokens(q, k, v, token_mask);
    return linear(att, L.oi, L.oi_b);
}

HeadOutputs SlamFormerModel::heads(const MapTokens& m) const {
    if (m.tokens.rows() != cfg_.tokens_per_frame() || m.tokens.cols() != cfg_.d_model)
        throw Error::contract("heads: map token shape mismatch");
    HeadOutputs out;

    // Pose head pools the frame-global register tokens.
    {
        const Tensor reg = slice_rows(m.tokens, cfg_.patch_tokens(), cfg_.registers);
        const Tensor pooled = mean_rows(reg);
        const Tensor h = gelu(linear(pooled, w_.pose_w1, w_.pose_b1));
        const Tensor raw = linear(h, w_.pose_w2, w_.pose_b2);  // [1 x 7]
        Tensor q = take_cols(raw, 0, 4);
        Tensor n2 = matmul(q, transpose(q));
        if (std::sqrt(static_cast<double>(n2.item())) < 1e-8) {
            std::cerr << "[slamformer] pose head produced a near-zero quaternion; "
                         "perturbing before normalization\n";
            q = add(q, Tensor::from_data({1, 4}, {scalar(1e-6), 0, 0, 0}));
            n2 = matmul(q, transpose(q));
        }
        out.quat = div(q, sqrt(n2));
        out.translation = take_cols(raw, 4, 3);
    }

    // Pointmap head decodes every patch token into a patch^2 x (3+1) block.
    {
        const Tensor patch_tok = slice_rows(m.tokens, 0, cfg_.patch_tokens());
        const Tensor h = gelu(linear(patch_tok, w_.pmap_w1, w_.pmap_b1));
        const Tensor raw = linear(h, w_.pmap_w2, w_.pmap_b2);  // [P x p^2*4]
        const Tensor per_pixel = unfold_patch_maps(raw, cfg_, 4);
        out.pointmap = take_cols(per_pixel, 0, 3);
        const Tensor conf_raw = take_cols(per_pixel, 3, 1);
        out.confidence = add(exp(conf_raw), scalar(1));  // Sigma* = 1 + exp(c) > 1
    }
    return out;
}

SE3Pose SlamFormerModel::pose_head(const MapTokens& m) const {
    const HeadOutputs h = heads(m);
    const auto q = h.quat.data();
    const auto t = h.translation.data();
    SE3Pose pose;
    pose.rotation = Quat{q[0], q[1], q[2], q[3]}.normalized();
    pose.translation = {t[0], t[1], t[2]};
    return pose;
}

FramePrediction SlamFormerModel::predict(const MapTokens& m) const {
    const HeadOutputs h = heads(m);
    FramePrediction pred;
    pred.h = cfg_.image_h;
    pred.w = cfg_.image_w;
    const int n = pred.h * pred.w;
    pred.pointmap.resize(static_cast<size_t>(n));
    pred.confidence.resize(static_cast<size_t>(n));
    pred.depth.resize(static_cast<size_t>(n));
    const auto pm = h.pointmap.data();
    const auto cf = h.confidence.data();
    for (int i = 0; i < n; ++i) {
        pred.pointmap[static_cast<size_t>(i)] = {pm[static_cast<size_t>(i) * 3 + 0],
                                                 pm[static_cast<size_t>(i) * 3 + 1],
                                                 pm[static_cast<size_t>(i) * 3 + 2]};
        pred.confidence[static_cast<size_t>(i)] = cf[static_cast<size_t>(i)];
        pred.depth[static_cast<size_t>(i)] = pred.pointmap[static_cast<size_t>(i)][2];
    }
    const auto q = h.quat.data();
    const auto t = h.translation.data();
    pred.pose.rotation = Quat{q[0], q[1], q[2], q[3]}.normalized();
    pred.pose.translation = {t[0], t[1], t[2]};
    return pred;
}

std::vector<std::pair<std::string, Tensor*>> SlamFormerModel::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add = [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); };
    add("patch_w", w_.patch_w); add("patch_b", w_.patch_b);
    add("pos_emb", w_.pos_emb); add("registers", w_.registers);
    add("reentry_w", w_.reentry_w); add("reentry_b", w_.reentry_b);
    add("type_emb", w_.type_emb);
    for (size_t l = 0; l < w_.layers.size(); ++l) {
        auto& L = w_.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "ln1_g", L.ln1_g); add(p + "ln1_b", L.ln1_b);
        add(p + "qi", L.qi); add(p + "ki", L.ki); add(p + "vi", L.vi); add(p + "oi", L.oi);
        add(p + "qi_b", L.qi_b); add(p + "ki_b", L.ki_b); add(p + "vi_b", L.vi_b); add(p + "oi_b", L.oi_b);
        add(p + "ln2_g", L.ln2_g); add(p + "ln2_b", L.ln2_b);
        add(p + "qx", L.qx); add(p + "kx", L.kx); add(p + "vx", L.vx); add(p + "ox", L.ox);
        add(p + "qx_b", L.qx_b); add(p + "kx_b", L.kx_b); add(p + "vx_b", L.vx_b); add(p + "ox_b", L.ox_b);
        add(p + "ln3_g", L.ln3_g); add(p + "ln3_b", L.ln3_b);
        add(p + "m1", L.m1); add(p + "m1_b", L.m1_b); add(p + "m2", L.m2); add(p + "m2_b", L.m2_b);
    }
    add("lnf_g", w_.lnf_g); add("lnf_b", w_.lnf_b);
    add("pose_w1", w_.pose_w1); add("pose_b1", w_.pose_b1);
    add("pose_w2", w_.pose_w2); add("pose_b2", w_.pose_b2);
    add("pmap_w1", w_.pmap_w1); add("pmap_b1", w_.pmap_b1);
    add("pmap_w2", w_.pmap_w2); add("pmap_b2", w_.pmap_b2);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> SlamFormerModel::parameters() const {
    auto mut = const_cast<SlamFormerModel*>(this)->parameters();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [n, t] : mut) out.emplace_back(n, t);
    return out;
}

SlamFormerModel SlamFormerModel::bind_to_tape(Tape& tape) const {
    SlamFormerModel bound(cfg_, w_);
    for (auto& [name, t] : bound.parameters()) {
        const bool pose_param = name.rfind("pose_", 0) == 0;
        if (pose_param && cfg_.freeze_pose_head) continue;
        *t = t->leaf(tape);
    }
    return bound;
}

namespace {

constexpr char kWeightMagic[4] = {'S', 'F', 'W', 'T'};
constexpr uint32_t kWeightVersion = 1;

template <typename T>
void put(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw Error::io("weight checkpoint: truncated file");
    return v;
}

}  // namespace

void SlamFormerModel::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error::io("weight checkpoint: cannot open " + path.string());
    os.write(kWeightMagic, 4);
    put<uint32_t>(os, kWeightVersion);
    put<int32_t>(os, cfg_.layers);
    put<int32_t>(os, cfg_.d_model);
    put<int32_t>(os, cfg_.heads);
    put<int32_t>(os, cfg_.patch);
    put<int32_t>(os, cfg_.registers);
    put<int32_t>(os, cfg_.image_h);
    put<int32_t>(os, cfg_.image_w);
    put<uint8_t>(os, cfg_.token_type_embedding ? 1 : 0);
    const auto params = parameters();
    put<uint32_t>(os, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(os, static_cast<uint32_t>(t->ndim()));
        for (int i = 0; i < t->ndim(); ++i) put<int32_t>(os, t->dim(i));
        for (scalar v : t->data()) put<float>(os, static_cast<float>(v));
    }
    if (!os) throw Error::io("weight checkpoint: write failed for " + path.string());
}

SlamFormerModel SlamFormerModel::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error::io("weight checkpoint: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kWeightMagic, 4) != 0)
        throw Error::io("weight checkpoint: bad magic in " + path.string());
    if (get<uint32_t>(is) != kWeightVersion)
        throw Error::io("weight checkpoint: unsupported version");
    ModelConfig cfg;
    cfg.layers = get<int32_t>(is);
    cfg.d_model = get<int32_t>(is);
    cfg.heads = get<int32_t>(is);
    cfg.patch = get<int32_t>(is);
    cfg.registers = get<int32_t>(is);
    cfg.image_h = get<int32_t>(is);
    cfg.image_w = get<int32_t>(is);
    cfg.token_type_embedding = get<uint8_t>(is) != 0;

    SlamFormerModel model(cfg, /*seed=*/0);
    const auto count = get<uint32_t>(is);
    auto params = model.parameters();
    if (count != params.size()) throw Error::io("weight checkpoint: parameter count mismatch");
    for (auto& [name, t] : params) {
        const auto len = get<uint32_t>(is);
        std::string stored(len, '\0');
        is.read(stored.data(), len);
        if (!is || stored != name)
            throw Error::io("weight checkpoint: unexpected parameter '" + stored + "'");
        const auto nd = get<uint32_t>(is);
        Shape shape(nd);
        for (auto& d : shape) d = get<int32_t>(is);
        if (shape != t->shape()) throw Error::io("weight checkpoint: shape mismatch for " + name);
        std::vector<scalar> data(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : data) v = static_cast<scalar>(get<float>(is));
        *t = Tensor::from_data(shape, std::move(data));
    }
    return model;
}

Tensor unfold_patch_maps(const Tensor& per_patch, const ModelConfig& cfg, int channels) {
    const int p = cfg.patch;
    const int gw = cfg.grid_w();
    if (per_patch.rows() != cfg.patch_tokens() || per_patch.cols() != p * p * channels)
        throw Error::contract("unfold_patch_maps: unexpected input shape");
    const int hw = cfg.image_h * cfg.image_w;
    std::vector<int64_t> idx(static_cast<size_t>(hw) * channels);
    for (int y = 0; y < cfg.image_h; ++y)
        for (int x = 0; x < cfg.image_w; ++x) {
            const int gy = y / p, gx = x / p, py = y % p, px = x % p;
            const int64_t patch_row = static_cast<int64_t>(gy) * gw + gx;
            for (int c = 0; c < channels; ++c)
                idx[(static_cast<size_t>(y) * cfg.image_w + x) * channels + c] =
                    patch_row * (p * p * channels) + (static_cast<int64_t>(py) * p + px) * channels + c;
        }
    return gather(per_patch, {hw, channels}, std::move(idx));
}

Tensor fold_patch_maps(const Tensor& per_pixel, const ModelConfig& cfg, int channels) {
    const int p = cfg.patch;
    const int gw = cfg.grid_w();
    if (per_pixel.rows() != cfg.image_h * cfg.image_w || per_pixel.cols() != channels)
        throw Error::contract("fold_patch_maps: unexpected input shape");
    std::vector<int64_t> idx(static_cast<size_t>(cfg.patch_tokens()) * p * p * channels);
    for (int y = 0; y < cfg.image_h; ++y)
        for (int x = 0; x < cfg.image_w; ++x) {
            const int gy = y / p, gx = x / p, py = y % p, px = x % p;
            const int64_t patch_row = static_cast<int64_t>(gy) * gw + gx;
            for (int c = 0; c < channels; ++c)
                idx[static_cast<size_t>(patch_row) * (p * p * channels) +
                    (static_cast<size_t>(py) * p + px) * channels + c] =
                    (static_cast<int64_t>(y) * cfg.image_w + x) * channels + c;
        }
    return gather(per_pixel, {cfg.patch_tokens(), p * p * channels}, std::move(idx));
}

}  // namespace slamformer
