#pragma once

// Checkpoint directory: manifest.json (architecture, seeds, epoch, metric
// snapshot) plus one binary blob per model component and an optional
// optimizer state blob.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hmtl/dataset.hpp"
#include "hmtl/model.hpp"
#include "hmtl/optim.hpp"

namespace hmtl::checkpoint {

constexpr int kFormatVersion = 1;

struct Meta {
    data::Task task = data::Task::Classification;
    int num_classes = 0;
    std::vector<std::string> class_names;
    std::uint64_t head_seed = 0;
    int epoch = 0;
    std::map<std::string, double> metrics;
    std::string protocol;
    /// Opaque JSON document owned by the trainer (resume state); may be empty.
    std::string trainer_state;
};

struct Loaded {
    model::ModelAssembly model;
    Meta meta;
    bool has_optimizer = false;
};

void save(const std::filesystem::path& dir, const model::ModelAssembly& model, const Meta& meta,
          const optim::Optimizer* optimizer = nullptr);

/// Rebuilds the assembly from the manifest and fills in every blob.
/// Throws SchemaError on missing files, version or shape mismatches.
Loaded load(const std::filesystem::path& dir);

/// Restores optimizer moments saved alongside the model.
void load_optimizer(const std::filesystem::path& dir, optim::Optimizer& optimizer);

/// Raw component blobs, for tests and tooling.
void write_blob(const std::filesystem::path& file, const std::vector<nn::Param*>& params);
void read_blob(const std::filesystem::path& file, const std::vector<nn::Param*>& params);

}  // namespace hmtl::checkpoint
