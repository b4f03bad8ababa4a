#pragma once

#include <string>

#include "c2f/dataset.hpp"
#include "c2f/hierarchy.hpp"
#include "c2f/trainer.hpp"

namespace c2f::desk {

/// Built-in desk benchmark: 3-step tree, source and target appearance specs.
HierarchyTree hierarchy();
std::string hierarchy_json();
DomainSpec source_spec();
DomainSpec target_spec();

struct Sizes {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t source = 600;
  std::size_t target = 600;
  std::size_t target_eval = 200;
};

struct Files {
  std::string hierarchy;
  std::string source;
  std::string target;
  std::string target_eval;
};

/// Writes the hierarchy and three dataset files under dir. Existing files
/// with matching content are left untouched.
Files write_benchmark(const std::string& dir, const Sizes& sizes, std::uint64_t seed);

/// Training settings used for the desk acceptance runs.
TrainConfig train_config(const Files& files, std::uint64_t seed);

}  // namespace c2f::desk
