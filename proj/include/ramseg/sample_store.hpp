#pragma once

#include <memory>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "ramseg/data_model.hpp"

namespace ramseg {

// Annotated exemplars by id. Safe for concurrent readers and writers.
class SampleStore {
 public:
  SampleStore() = default;
  explicit SampleStore(ClassMap class_map) : class_map_(std::move(class_map)) {}
  SampleStore(const SampleStore& other);
  SampleStore& operator=(const SampleStore&) = delete;

  static SampleStore from_manifest(const DatasetManifest& manifest);
  static SampleStore from_records(std::vector<SampleRecord> records, ClassMap class_map);

  // Validates the record; throws DuplicateId if the id is taken.
  void add(SampleRecord record);
  std::shared_ptr<const SampleRecord> get(const std::string& id) const;  // MissingSample if absent
  bool contains(const std::string& id) const;
  std::size_t size() const;
  std::vector<std::string> ids() const;  // insertion order

  const ClassMap& class_map() const noexcept { return class_map_; }

 private:
  ClassMap class_map_;
  std::unordered_map<std::string, std::shared_ptr<const SampleRecord>> records_;
  std::vector<std::string> order_;
  mutable std::shared_mutex mutex_;
};

}  // namespace ramseg
