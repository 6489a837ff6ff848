#pragma once

#include <string>
#include <vector>

#include "feddg/morphology.hpp"
#include "feddg/spectral.hpp"

namespace feddg {

// Per-domain appearance knobs. Geometry is drawn from one shared
// distribution; only these style fields shift between domains.
struct DomainStyle {
    double intensity_bias = 0.0;
    double contrast_gain = 1.0;   // > 0
    double texture_freq = 4.0;    // cycles per image
    double texture_amp = 0.0;
    double noise_sigma = 0.0;     // >= 0
    double grad_dx = 0.0;         // background gradient, full-frame delta
    double grad_dy = 0.0;
};

// Nested-ellipse segmentation target: class 0 is the outer "disc" region,
// class 1 the inner "cup"; cup ⊆ disc, both nonempty with area in
// [2%, 40%] of the frame.
struct SyntheticSample {
    Image image;
    std::vector<BinaryMask> label;  // one mask per class
    int domain_id = 0;
    int sample_id = 0;
};

struct Dataset {
    int domain_id = 0;
    std::string name;
    std::vector<SyntheticSample> train;
    std::vector<SyntheticSample> test;
};

struct SynthConfig {
    int img_size = 64;
    int n_train = 60;
    int n_test = 20;
};

std::vector<SyntheticSample> make_domain(int domain_id, const DomainStyle& style, int n_samples,
                                         uint64_t seed, int img_size = 64, int id_offset = 0);

// The preset 4-corner style table used by default_domain_suite.
std::vector<DomainStyle> preset_styles();

std::vector<Dataset> default_domain_suite(int k, uint64_t seed, const SynthConfig& cfg = {});

// On-disk format: per sample `<name>.img` / `<name>.lbl`, each a 16-byte
// header (magic u32, H u32, W u32, C u32, little-endian) followed by
// float32 row-major payload; magic is "FDIM" for images, "FDLB" for labels.
// `manifest.json` lists {name, domain_id, sample_id, split}.
void save_dataset(const std::string& dir, const std::vector<Dataset>& suite);
std::vector<Dataset> load_external(const std::string& dir);

}  // namespace feddg
