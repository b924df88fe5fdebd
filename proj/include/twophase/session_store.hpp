#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "twophase/session.hpp"

struct sqlite3;

namespace twophase {

// Random 32-hex-digit identifier.
std::string new_session_id();

class SessionStore {
 public:
  virtual ~SessionStore() = default;
  // Throws InvalidArgument if the id already exists.
  virtual void insert(const Session& session) = 0;
  virtual std::optional<Session> load(const std::string& id) = 0;
  // Writes `session` only if the stored copy is still at `expected_version`;
  // throws VersionConflict otherwise and NotFound for unknown ids.
  virtual void update(const Session& session, long long expected_version) = 0;
};

// Single-file SQLite key-value table (id -> session document). ":memory:" works.
class SqliteSessionStore final : public SessionStore {
 public:
  explicit SqliteSessionStore(const std::string& path);
  ~SqliteSessionStore() override;
  SqliteSessionStore(const SqliteSessionStore&) = delete;
  SqliteSessionStore& operator=(const SqliteSessionStore&) = delete;

  void insert(const Session& session) override;
  std::optional<Session> load(const std::string& id) override;
  void update(const Session& session, long long expected_version) override;

 private:
  void exec(const char* sql);
  sqlite3* db_ = nullptr;
  std::mutex mutex_;
};

// One session per directory, stored as session.json (written atomically).
class DirectorySessionStore final : public SessionStore {
 public:
  explicit DirectorySessionStore(std::filesystem::path dir);

  void insert(const Session& session) override;
  std::optional<Session> load(const std::string& id) override;
  void update(const Session& session, long long expected_version) override;

  // The directory's session regardless of id; NotFound when absent.
  Session load_only();
  const std::filesystem::path& file() const noexcept { return file_; }

 private:
  void write(const Session& session);
  std::filesystem::path dir_;
  std::filesystem::path file_;
};

}  // namespace twophase
