#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "usground/geometry.hpp"
#include "usground/image.hpp"

namespace usground {

enum class DatasetRole { seen, unseen };
enum class Split { train, val, test };

std::string to_string(DatasetRole role);
std::string to_string(Split split);
DatasetRole parse_role(const std::string &text);
Split parse_split(const std::string &text);

struct SampleRecord {
    std::string image_path;  // relative to the manifest directory
    std::string mask_path;
    std::string prompt;
    std::optional<Split> split;
};

struct DatasetManifest {
    std::string name;
    std::string organ;
    DatasetRole role = DatasetRole::seen;
    std::vector<SampleRecord> samples;
    // Directory the relative record paths resolve against; not serialized.
    std::filesystem::path base_dir;

    bool is_split() const;
    std::size_t count(Split split) const;
};

DatasetManifest load_manifest(const std::filesystem::path &path);
void save_manifest(const std::filesystem::path &path, const DatasetManifest &manifest);
std::string manifest_to_json(const DatasetManifest &manifest);
DatasetManifest manifest_from_json(const std::string &text, std::filesystem::path base_dir = {});

struct ImageSize {
    int height = 0;
    int width = 0;
    bool operator==(const ImageSize &) const = default;
};

struct Sample {
    GrayImage image;
    BinaryMask mask;
    BoundingBox box;
    std::string prompt;
    std::string dataset;
    ImageSize original_size;
    std::size_t record_index = 0;
};

// Scales a box from one canvas to another: x by w_new/w_old, y by h_new/h_old.
BoundingBox rescale_box(const BoundingBox &box, ImageSize from, ImageSize to);

struct IngestStats {
    std::size_t emitted = 0;
    std::size_t skipped_empty = 0;
};

// Streams every record (optionally restricted to one split) through `sink`.
// Boxes come from the original-resolution mask and are then rescaled.
// Records with an all-background mask are skipped, logged and counted.
IngestStats ingest(const DatasetManifest &manifest, ImageSize target,
                   const std::function<void(Sample &&)> &sink,
                   std::optional<Split> only = std::nullopt);

std::vector<Sample> ingest_all(const DatasetManifest &manifest, ImageSize target,
                               std::optional<Split> only = std::nullopt,
                               IngestStats *stats = nullptr);

// Builds one Sample from an in-memory image/mask pair (same rules as ingest).
Sample make_sample(const GrayImage &image, const BinaryMask &mask, std::string prompt,
                   ImageSize target);

struct SplitFractions {
    double train = 0.7;
    double val = 0.2;
    double test = 0.1;
};

// Seeded shuffle then train = round(f_train*n), val = round(f_val*n) (half up),
// test = remainder. Unseen manifests are labeled test in full.
DatasetManifest split(const DatasetManifest &manifest, SplitFractions fractions, std::uint64_t seed,
                      bool override_existing = false);

// Records of one split. Requesting train/val records from an unseen manifest
// is a StateError.
std::vector<std::size_t> split_indices(const DatasetManifest &manifest, Split which);

// Geometric primitives. Mask and box always follow the image.
Sample hflip(const Sample &sample);
Sample crop(const Sample &sample, int x0, int y0, int width, int height);
Sample pad(const Sample &sample, int left, int top, int right, int bottom, float fill);
Sample resize_sample(const Sample &sample, ImageSize size);
// Overwrites a rectangle of the image only; mask and box are unchanged.
Sample erase(const Sample &sample, int x0, int y0, int width, int height, float fill);

struct AugmentConfig {
    double p_flip = 0.5;
    double p_scale = 0.5;
    double scale_min = 0.8;
    double scale_max = 1.2;
    double p_pad = 0.3;
    double max_pad_fraction = 0.15;
    double p_crop = 0.3;
    double min_crop_fraction = 0.7;
    double p_erase = 0.3;
    double max_erase_fraction = 0.25;
    double max_foreground_erased = 0.5;
    int retry_cap = 10;
};

// Seeded random subset of {flip, scale jitter, pad, crop, erase}; output has
// the input's canvas size.
Sample augment(const Sample &sample, std::uint64_t seed, const AugmentConfig &config = {});

}  // namespace usground
