#include "ramseg/sample_store.hpp"

#include <mutex>

namespace ramseg {

SampleStore::SampleStore(const SampleStore& other) {
  std::shared_lock lock(other.mutex_);
  class_map_ = other.class_map_;
  records_ = other.records_;
  order_ = other.order_;
}

SampleStore SampleStore::from_manifest(const DatasetManifest& manifest) {
  return from_records(load_samples(manifest), manifest.class_map);
}

SampleStore SampleStore::from_records(std::vector<SampleRecord> records, ClassMap class_map) {
  SampleStore store(std::move(class_map));
  for (auto& r : records) store.add(std::move(r));
  return store;
}

void SampleStore::add(SampleRecord record) {
  record.validate();
  std::unique_lock lock(mutex_);
  if (records_.contains(record.id)) fail(ErrorCode::DuplicateId, "sample '" + record.id + "' already stored");
  order_.push_back(record.id);
  auto id = record.id;
  records_.emplace(std::move(id), std::make_shared<const SampleRecord>(std::move(record)));
}

std::shared_ptr<const SampleRecord> SampleStore::get(const std::string& id) const {
  std::shared_lock lock(mutex_);
  auto it = records_.find(id);
  if (it == records_.end()) fail(ErrorCode::MissingSample, "no sample payload for id '" + id + "'");
  return it->second;
}

bool SampleStore::contains(const std::string& id) const {
  std::shared_lock lock(mutex_);
  return records_.contains(id);
}

std::size_t SampleStore::size() const {
  std::shared_lock lock(mutex_);
  return records_.size();
}

std::vector<std::string> SampleStore::ids() const {
  std::shared_lock lock(mutex_);
  return order_;
}

}  // namespace ramseg
