#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace mripipe {

enum class Modality { standard_mri, mra };
enum class View { sagittal, axial, coronal };
enum class SequenceType { t1, t2, merge, pd, stir };
enum class Partition { train, val, test };

constexpr std::array<View, 3> kAllViews = {View::sagittal, View::axial, View::coronal};
constexpr std::array<Partition, 3> kAllPartitions = {Partition::train, Partition::val,
                                                     Partition::test};

std::string to_string(Modality m);
std::string to_string(View v);
std::string to_string(SequenceType t);
std::string to_string(Partition p);

Modality modality_from_string(const std::string& s);
View view_from_string(const std::string& s);
SequenceType sequence_type_from_string(const std::string& s);
Partition partition_from_string(const std::string& s);

/// Error taxonomy shared across modules. The CLI maps kinds to exit codes:
/// validation/config -> 2, dependency -> 3, training -> 4.
class PipelineError : public std::runtime_error {
 public:
  enum class Kind { validation, dependency, training, internal };

  PipelineError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

[[noreturn]] void fail_validation(const std::string& msg);
[[noreturn]] void fail_dependency(const std::string& msg);
[[noreturn]] void fail_training(const std::string& msg);

uint64_t fnv1a64(const void* data, std::size_t n, uint64_t seed = 14695981039346656037ull);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);
uint64_t hash_file(const std::string& path);

/// Runs fn(0..n-1) on up to `workers` threads. Each index must touch only its
/// own output slot; with that contract results are identical for any worker count.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace mripipe
