#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "usground/dataset.hpp"
#include "usground/geometry.hpp"
#include "usground/image.hpp"

namespace usground {

enum class LesionFamily { bright, dark };
enum class DomainVariant { A, B };

std::string to_string(LesionFamily family);
std::string to_string(DomainVariant variant);
LesionFamily parse_family(const std::string &text);
DomainVariant parse_variant(const std::string &text);

// Prompt text paired with a lesion family ("bright lesion" / "dark lesion").
std::string family_prompt(LesionFamily family);

struct SynthConfig {
    std::size_t count = 100;
    ImageSize canvas{128, 128};
    // Each image draws its family uniformly from this list.
    std::vector<LesionFamily> families{LesionFamily::bright};
    // Variant B: coarser, heavier speckle and depth attenuation.
    DomainVariant variant = DomainVariant::A;
    double min_lesion_area = 80.0;  // pixels, measured on the tight box
    std::string name = "synthetic";
    std::string organ = "phantom";
    DatasetRole role = DatasetRole::seen;
};

struct SyntheticItem {
    GrayImage image;
    BinaryMask mask;
    LesionFamily family = LesionFamily::bright;
    std::string prompt;
};

// One image; a pure function of (config, seed, index).
SyntheticItem generate_item(const SynthConfig &config, std::uint64_t seed, std::size_t index);

// Writes images/, masks/ and manifest.json under `out_dir` (created if
// missing). Fully reproducible from the seed.
DatasetManifest generate_synthetic(const SynthConfig &config, std::uint64_t seed,
                                   const std::filesystem::path &out_dir);

}  // namespace usground
