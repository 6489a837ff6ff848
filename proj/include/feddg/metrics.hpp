#pragma once

#include <vector>

#include "feddg/morphology.hpp"

namespace feddg {

// 2|A∩B| / (|A|+|B|); both-empty convention -> 1.0.
double dice_coefficient(const BinaryMask& pred, const BinaryMask& gt);

struct HausdorffResult {
    double distance = 0.0;
    bool degenerate = false;  // one side empty; distance is the frame diagonal
};

// Exact symmetric Hausdorff distance between foreground pixel centers,
// Euclidean. The inner min runs over boundary pixels of the other set and
// only pixels outside that set contribute to the sup, which is exactly the
// full all-pairs value (tests verify against the brute force).
HausdorffResult hausdorff(const BinaryMask& pred, const BinaryMask& gt);

// 95th-percentile variant of the directed distances, available behind a flag.
HausdorffResult hausdorff95(const BinaryMask& pred, const BinaryMask& gt);

struct ClassMetrics {
    double dice = 0.0;
    double hd = 0.0;
};

struct SampleMetrics {
    std::vector<ClassMetrics> per_class;
    double mean_dice = 0.0;
    double mean_hd = 0.0;
};

struct AggregateMetrics {
    std::vector<ClassMetrics> mean_per_class;
    std::vector<ClassMetrics> std_per_class;
    double mean_dice = 0.0;
    double std_dice = 0.0;
    double mean_hd = 0.0;
    double std_hd = 0.0;
    size_t n = 0;
};

SampleMetrics evaluate_sample(const std::vector<BinaryMask>& pred_classes,
                              const std::vector<BinaryMask>& gt_classes);

AggregateMetrics aggregate(const std::vector<SampleMetrics>& samples);

}  // namespace feddg
