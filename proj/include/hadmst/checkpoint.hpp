#pragma once

// Single-file checkpoint archive: JSON header (epoch, gene panel, parameter
// manifest for both networks) followed by the raw parameter values.

#include <string>
#include <vector>

#include "hadmst/model.hpp"

namespace hadmst {
namespace checkpoint {

struct Meta {
    int epoch = 0;
    std::vector<std::string> gene_panel;
};

void save(const std::string& path, const model::HadmstModel& m, const Meta& meta);

// Restores parameters in place. Throws when the archive is malformed, a
// parameter is missing / has the wrong shape, or the gene panel differs from
// `expected_panel` (pass empty to skip the panel check). Returns the metadata.
Meta load(const std::string& path, model::HadmstModel& m,
          const std::vector<std::string>& expected_panel = {});

}  // namespace checkpoint
}  // namespace hadmst
