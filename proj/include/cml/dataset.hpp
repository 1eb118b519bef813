// cml/dataset.hpp

// Copyright 2026 The CML Annotation Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <vector>

#include "cml/features.hpp"

namespace cml {

// Training rows with one class id per row. The rest class is an ordinary
// class here.
struct LabeledFrameSet {
  RowMatrix rows;
  std::vector<int> labels;
  std::vector<int> class_ids;  // distinct ids present, in a stable order

  Eigen::Index size() const { return rows.rows(); }
  Eigen::Index dim() const { return rows.cols(); }

  void Validate() const {
    if (static_cast<std::size_t>(rows.rows()) != labels.size())
      throw Error(ErrorCode::kLengthMismatch, "rows and labels differ in length");
    for (int l : labels)
      if (std::find(class_ids.begin(), class_ids.end(), l) == class_ids.end())
        throw Error(ErrorCode::kValidationError, "label " + std::to_string(l) + " missing from class_ids");
  }
};

// Appends b to a. Class ids of b not yet in a are appended in b's order.
inline void Append(LabeledFrameSet& a, const LabeledFrameSet& b) {
  if (a.size() == 0 && a.class_ids.empty()) {
    a = b;
    return;
  }
  if (b.size() > 0 && a.dim() != b.dim())
    throw Error(ErrorCode::kDimensionMismatch, "cannot concatenate frame sets of different dimension");
  const Eigen::Index old = a.rows.rows();
  a.rows.conservativeResize(old + b.rows.rows(), b.size() > 0 ? b.dim() : a.dim());
  if (b.size() > 0) a.rows.bottomRows(b.rows.rows()) = b.rows;
  a.labels.insert(a.labels.end(), b.labels.begin(), b.labels.end());
  for (int id : b.class_ids)
    if (std::find(a.class_ids.begin(), a.class_ids.end(), id) == a.class_ids.end()) a.class_ids.push_back(id);
}

}  // namespace cml
