#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "slamformer/attention.hpp"
#include "slamformer/geometry.hpp"
#include "slamformer/tensor.hpp"

namespace slamformer {

struct ModelConfig {
    int layers = 4;
    int d_model = 64;
    int heads = 4;
    int patch = 8;
    int registers = 2;
    int image_h = 32;
    int image_w = 32;
    bool token_type_embedding = true;
    bool freeze_pose_head = false;

    int grid_h() const { return image_h / patch; }
    int grid_w() const { return image_w / patch; }
    int patch_tokens() const { return grid_h() * grid_w(); }
    int tokens_per_frame() const { return patch_tokens() + registers; }
    void validate() const;
};

// RGB pixels in [0,1], row-major (y, x, channel).
struct ImageFrame {
    int h = 0;
    int w = 0;
    std::vector<float> rgb;
    double timestamp = 0.0;
    int frame_index = 0;
};

// Validates the pixel range at ingestion.
ImageFrame make_image_frame(int h, int w, std::vector<float> rgb, double timestamp,
                            int frame_index);

struct FrameTokens {
    Tensor tokens;  // [tokens_per_frame x d_model]
    int frame_index = 0;
};

enum class TokenOrigin { frontend, backend };

// Per-frame implicit scene representation produced by the backbone.
struct MapTokens {
    Tensor tokens;  // [tokens_per_frame x d_model]
    int frame_index = 0;
    TokenOrigin origin = TokenOrigin::frontend;
};

// Decoded per-frame outputs, plain values.
struct FramePrediction {
    int h = 0;
    int w = 0;
    std::vector<Vec3> pointmap;      // camera-local coordinates, row-major
    std::vector<double> confidence;  // > 1 everywhere
    std::vector<double> depth;       // = pointmap z
    SE3Pose pose;                    // camera-to-world
};

// Tensor-valued head outputs; stay on the tape during training.
struct HeadOutputs {
    Tensor pointmap;    // [H*W x 3]
    Tensor confidence;  // [H*W x 1], = 1 + exp(raw)
    Tensor quat;        // [1 x 4], unit norm
    Tensor translation; // [1 x 3]
};

struct BackboneResult {
    std::vector<MapTokens> map_tokens;
    // blocks[frame][layer]: K/V captured at the inter-frame attention input.
    std::vector<std::vector<KVBlock>> blocks;
};

struct LayerWeights {
    Tensor ln1_g, ln1_b;  // pre intra-frame attention
    Tensor qi, ki, vi, oi, qi_b, ki_b, vi_b, oi_b;
    Tensor ln2_g, ln2_b;  // pre inter-frame attention
    Tensor qx, kx, vx, ox, qx_b, kx_b, vx_b, ox_b;
    Tensor ln3_g, ln3_b;  // pre MLP
    Tensor m1, m1_b, m2, m2_b;
};

struct ModelWeights {
    Tensor patch_w, patch_b;   // [patch^2*3 x d], [1 x d]
    Tensor pos_emb;            // [patch_tokens x d]
    Tensor registers;          // [registers x d], shared across frames
    Tensor reentry_w, reentry_b;
    Tensor type_emb;           // [1 x d] marker for re-entered map tokens
    std::vector<LayerWeights> layers;
    Tensor lnf_g, lnf_b;
    Tensor pose_w1, pose_b1, pose_w2, pose_b2;  // d -> d -> 7
    Tensor pmap_w1, pmap_b1, pmap_w2, pmap_b2;  // d -> d -> patch^2*4
};

// The unified transformer: one backbone serving incremental (cache-driven)
// and global (full-attention) passes, plus the decoding heads.
class SlamFormerModel {
public:
    SlamFormerModel(ModelConfig cfg, uint64_t seed);
    SlamFormerModel(ModelConfig cfg, ModelWeights weights);

    const ModelConfig& config() const { return cfg_; }
    const ModelWeights& weights() const { return w_; }

    FrameTokens encode_image(const ImageFrame& frame) const;
    FrameTokens reenter_map_tokens(const MapTokens& m) const;

    // Batch mode (cache == nullptr): one pass over all frames under the mask.
    // Incremental mode (cache != nullptr): exactly one new frame whose
    // inter-frame attention runs over [cached frames || self].
    BackboneResult backbone_forward(const std::vector<FrameTokens>& frames,
                                    const AttentionMask& mask,
                                    const KVCache* cache = nullptr) const;

    HeadOutputs heads(const MapTokens& m) const;
    SE3Pose pose_head(const MapTokens& m) const;
    FramePrediction predict(const MapTokens& m) const;

    // Taped view sharing storage; parameters become leaves of the tape.
    // When freeze_pose_head is set the pose head keeps constant weights.
    SlamFormerModel bind_to_tape(Tape& tape) const;

    std::vector<std::pair<std::string, Tensor*>> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;

    void save(const std::filesystem::path& path) const;
    static SlamFormerModel load(const std::filesystem::path& path);

private:
    ModelConfig cfg_;
    ModelWeights w_;
};

// Per-patch head values [patch_tokens x patch^2*C] unfolded to pixel maps
// [H*W x C] and back; exact inverses of each other.
Tensor unfold_patch_maps(const Tensor& per_patch, const ModelConfig& cfg, int channels);
Tensor fold_patch_maps(const Tensor& per_pixel, const ModelConfig& cfg, int channels);

}  // namespace slamformer
