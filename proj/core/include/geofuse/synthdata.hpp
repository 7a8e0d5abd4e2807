#pragma once

#include <array>
#include <string>
#include <vector>

#include "geofuse/fusion.hpp"
#include "geofuse/rng.hpp"

namespace geofuse {

enum class QuestionType { CloserToAnchor, FasterOfTwo };
enum class Split { Train, Test };

std::string to_string(QuestionType q);
QuestionType question_type_from_string(const std::string& s);

/// Synthetic scene layout. Vision tokens carry appearance only (class
/// one-hot, color, one shortcut-marker channel); geometry tokens carry true
/// coordinates and per-frame displacement. The label is a pure function of
/// geometry, while the marker channel agrees with the label only with
/// probability shortcut_strength on the train split (chance on test).
struct SceneConfig {
    GridShape grid{4, 4, 4};  // vision grid (h, w, frames)
    int geometry_h = 4;
    int geometry_w = 4;
    int n_objects = 4;
    int c_v = 32;  // vision width; equals the model width c
    int c_g = 6;   // geometry width
    int c = 32;    // model / prompt width
    double shortcut_strength = 0.95;
    QuestionType question_type = QuestionType::FasterOfTwo;
    double coordinate_range = 5.0;

    GridShape geometry_grid() const { return GridShape{geometry_h, geometry_w, grid.t}; }
    void validate() const;
    bool operator==(const SceneConfig&) const = default;
};

// Vision channel layout.
inline constexpr int kClassChannels = 8;
inline constexpr int kColorChannels = 3;
inline constexpr int kMarkerChannel = kClassChannels + kColorChannels;  // 11
// Prompt channel layout: question type in [0,1], object class one-hot in
// [2, 2+kClassChannels), token-role one-hot in [10, 14).
inline constexpr int kPromptTokens = 4;

struct Sample {
    TokenSequence vision;
    TokenSequence geometry;
    TokenSequence prompt;
    int label = 0;
    bool shortcut_agrees = false;

    // generation metadata, used by probes and diagnostics only
    int anchor_cell = -1;  // vision-grid cell, -1 for FasterOfTwo
    std::array<int, 2> candidate_cells{-1, -1};
    std::array<int, 2> candidate_classes{-1, -1};
    int marked_candidate = -1;
    uint64_t index = 0;
    Split split = Split::Train;
};

/// One scene draw. Degenerate scenes (coordinate or speed ties) are
/// rejected and redrawn from the same stream.
Sample generate_sample(const SceneConfig& cfg, Split split, Rng& rng);

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

/// Seed-deterministic dataset; per-sample streams are derived from
/// (seed, split, index) so generation order does not matter.
Dataset make_dataset(const SceneConfig& cfg, int n_train, int n_test, uint64_t seed);

/// Recomputes the label from the geometry tokens alone.
int oracle_label(const SceneConfig& cfg, const TokenSequence& geometry);

/// Per-candidate geometry statistic the label compares: distances to the
/// anchor for CloserToAnchor, mean displacement magnitudes for FasterOfTwo.
std::array<double, 2> oracle_features(const SceneConfig& cfg, const TokenSequence& geometry);

/// Reads only the shortcut-marker channel: predicts the candidate the
/// marker sign points at.
int shortcut_probe_prediction(const Sample& sample);

// JSON-lines dataset file: one sample object per line.
std::string sample_to_json(const Sample& s);
Sample sample_from_json(const std::string& line, const SceneConfig& cfg);
void write_jsonl(const Dataset& data, const std::string& path);
Dataset read_jsonl(const std::string& path, const SceneConfig& cfg);

}  // namespace geofuse
