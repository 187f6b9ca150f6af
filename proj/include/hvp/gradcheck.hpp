#ifndef HVP_GRADCHECK_HPP
#define HVP_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "hvp/graph.hpp"

namespace hvp {

struct GradCheckGroup {
  std::string name;
  int checked = 0;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0.0;
};

// Central-difference verification of analytic gradients. loss(true) must zero
// the grads, run forward+backward in 64-bit and return the loss; loss(false)
// returns the loss only. Samples at least min_coords coordinates from every
// parameter group (all of them for small groups). A non-finite loss or
// gradient fails with a diagnostic naming the offending group.
GradCheckReport finite_diff_check(const std::vector<Param*>& params,
                                  const std::function<double(bool with_grad)>& loss,
                                  int min_coords = 32, double eps = 1e-4, uint64_t seed = 0);

}  // namespace hvp

#endif
