#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "json.hpp"

namespace kpt {

struct EpochRecord {
  std::size_t epoch = 0;  // counted from 1
  double train_loss = 0.0;
  double val_accuracy = 0.0;  // percent
  double learning_rate = 0.0;
  std::optional<double> wall_seconds;

  bool operator==(const EpochRecord&) const = default;
};

using RunHistory = std::vector<EpochRecord>;

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

}  // namespace kpt
