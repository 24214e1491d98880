#include "mripipe/common.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <thread>
#include <vector>

namespace mripipe {

std::string to_string(Modality m) {
  return m == Modality::standard_mri ? "standard_mri" : "mra";
}

std::string to_string(View v) {
  switch (v) {
    case View::sagittal: return "sagittal";
    case View::axial: return "axial";
    case View::coronal: return "coronal";
  }
  return "?";
}

std::string to_string(SequenceType t) {
  switch (t) {
    case SequenceType::t1: return "T1";
    case SequenceType::t2: return "T2";
    case SequenceType::merge: return "MERGE";
    case SequenceType::pd: return "PD";
    case SequenceType::stir: return "STIR";
  }
  return "?";
}

std::string to_string(Partition p) {
  switch (p) {
    case Partition::train: return "train";
    case Partition::val: return "val";
    case Partition::test: return "test";
  }
  return "?";
}

Modality modality_from_string(const std::string& s) {
  if (s == "standard_mri") return Modality::standard_mri;
  if (s == "mra") return Modality::mra;
  fail_validation("unknown modality \"" + s + "\" (expected standard_mri|mra)");
}

View view_from_string(const std::string& s) {
  if (s == "sagittal") return View::sagittal;
  if (s == "axial") return View::axial;
  if (s == "coronal") return View::coronal;
  fail_validation("unknown view \"" + s + "\" (expected sagittal|axial|coronal)");
}

SequenceType sequence_type_from_string(const std::string& s) {
  if (s == "T1") return SequenceType::t1;
  if (s == "T2") return SequenceType::t2;
  if (s == "MERGE") return SequenceType::merge;
  if (s == "PD") return SequenceType::pd;
  if (s == "STIR") return SequenceType::stir;
  fail_validation("unknown sequence_type \"" + s + "\" (expected T1|T2|MERGE|PD|STIR)");
}

Partition partition_from_string(const std::string& s) {
  if (s == "train") return Partition::train;
  if (s == "val") return Partition::val;
  if (s == "test") return Partition::test;
  fail_validation("unknown partition \"" + s + "\"");
}

void fail_validation(const std::string& msg) {
  throw PipelineError(PipelineError::Kind::validation, msg);
}

void fail_dependency(const std::string& msg) {
  throw PipelineError(PipelineError::Kind::dependency, msg);
}

void fail_training(const std::string& msg) {
  throw PipelineError(PipelineError::Kind::training, msg);
}

uint64_t fnv1a64(const void* data, std::size_t n, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("cannot open file for hashing: " + path);
  uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  if (workers <= 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int nthreads = std::min(workers, n);
  std::atomic<int> next{0};
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(nthreads));
  for (int t = 0; t < nthreads; ++t) {
    threads.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& th : threads) th.join();
}

}  // namespace mripipe
