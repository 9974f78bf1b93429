#pragma once

#include "fedseg/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fedseg {

// Per-domain imaging style: a gamma curve followed by an affine intensity
// map, a fixed background texture and additive pixel noise. Distinct
// domains stand in for distinct acquisition sites.
struct DomainStyle {
    double scale = 1.0;    // in [0.3, 3]
    double offset = 0.0;
    double gamma = 1.0;    // in [0.5, 2]
    int texture_freq = 0;  // background texture cycles per image; 0 = none
    double noise_sigma = 0.0;  // in [0, 0.1]

    bool is_identity() const {
        return scale == 1.0 && offset == 0.0 && gamma == 1.0 && texture_freq == 0 &&
               noise_sigma == 0.0;
    }
};

// Fixed, documented style table. First entry is the identity (canonical)
// domain; scale and offset are pairwise distinct so any two styles differ
// in at least two fields. Supports up to 8 domains.
std::vector<DomainStyle> default_styles(int k_plus_1);

struct SegSample {
    Tensor image;  // (1, H, W); any finite values after styling
    Tensor mask;   // (structures, H, W); exactly binary, style-independent
    int domain = -1;
};

struct FederationDataset {
    int domains = 0;
    int image_size = 0;
    int structures = 1;
    std::uint64_t seed = 0;
    std::vector<DomainStyle> styles;
    std::vector<std::vector<SegSample>> train;  // [domain][index]
    std::vector<std::vector<SegSample>> test;

    std::uint32_t checksum() const;  // over all image and mask bytes
};

// Deterministic multi-domain segmentation data: the blob content (and
// therefore every mask) is shared across domains for a given sample index;
// only the style differs. A quarter of per_domain goes to the test split.
FederationDataset generate(int domains, int per_domain, int image_size, std::uint64_t seed,
                           int structures = 1,
                           const std::vector<DomainStyle>* styles = nullptr);

// One directory per domain with raw float64 images/masks plus a JSON
// manifest describing shapes, seed and the style table.
void export_dataset(const FederationDataset& ds, const std::filesystem::path& dir);

}  // namespace fedseg
