#include "twophase/session_store.hpp"

#include <sqlite3.h>

#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace twophase {
namespace {

class Statement {
 public:
  Statement(sqlite3* db, const char* sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) fail("prepare");
  }
  ~Statement() { sqlite3_finalize(stmt_); }
  Statement(const Statement&) = delete;
  Statement& operator=(const Statement&) = delete;

  void bind(int i, const std::string& text) {
    if (sqlite3_bind_text(stmt_, i, text.c_str(), static_cast<int>(text.size()), SQLITE_TRANSIENT) != SQLITE_OK) fail("bind");
  }
  void bind(int i, long long v) {
    if (sqlite3_bind_int64(stmt_, i, v) != SQLITE_OK) fail("bind");
  }
  // True while a row is available.
  bool step() {
    const int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    if (rc == SQLITE_CONSTRAINT) throw Error(ErrorKind::InvalidArgument, "session id already exists");
    fail("step");
  }
  std::string text(int col) const {
    const auto* p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, col));
    return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col))) : std::string();
  }
  long long integer(int col) const { return sqlite3_column_int64(stmt_, col); }

 private:
  [[noreturn]] void fail(const char* what) const {
    throw std::runtime_error(std::string("sqlite ") + what + ": " + sqlite3_errmsg(db_));
  }
  sqlite3* db_;
  sqlite3_stmt* stmt_ = nullptr;
};

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::NotFound, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string new_session_id() {
  static std::mutex mutex;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mutex);
  std::ostringstream ss;
  ss << std::hex << std::setfill('0') << std::setw(16) << rng() << std::setw(16) << rng();
  return ss.str();
}

SqliteSessionStore::SqliteSessionStore(const std::string& path) {
  if (sqlite3_open(path.c_str(), &db_) != SQLITE_OK) {
    const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    throw std::runtime_error("cannot open session store " + path + ": " + msg);
  }
  exec("PRAGMA journal_mode=WAL");
  exec("CREATE TABLE IF NOT EXISTS sessions (id TEXT PRIMARY KEY, version INTEGER NOT NULL, doc TEXT NOT NULL)");
}

SqliteSessionStore::~SqliteSessionStore() { sqlite3_close(db_); }

void SqliteSessionStore::exec(const char* sql) {
  char* err = nullptr;
  if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    const std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw std::runtime_error("sqlite: " + msg);
  }
}

void SqliteSessionStore::insert(const Session& session) {
  std::lock_guard lock(mutex_);
  Statement st(db_, "INSERT INTO sessions (id, version, doc) VALUES (?1, ?2, ?3)");
  st.bind(1, session.id());
  st.bind(2, session.version());
  st.bind(3, session.to_json().dump());
  st.step();
}

std::optional<Session> SqliteSessionStore::load(const std::string& id) {
  std::string doc;
  {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT doc FROM sessions WHERE id = ?1");
    st.bind(1, id);
    if (!st.step()) return std::nullopt;
    doc = st.text(0);
  }
  return Session::from_json(json::parse(doc));
}

void SqliteSessionStore::update(const Session& session, long long expected_version) {
  std::lock_guard lock(mutex_);
  Statement st(db_, "UPDATE sessions SET version = ?1, doc = ?2 WHERE id = ?3 AND version = ?4");
  st.bind(1, session.version());
  st.bind(2, session.to_json().dump());
  st.bind(3, session.id());
  st.bind(4, expected_version);
  st.step();
  if (sqlite3_changes(db_) == 1) return;
  Statement probe(db_, "SELECT version FROM sessions WHERE id = ?1");
  probe.bind(1, session.id());
  if (!probe.step()) throw Error(ErrorKind::NotFound, "unknown session " + session.id());
  throw Error(ErrorKind::VersionConflict, "session " + session.id() + " moved to version " +
                                              std::to_string(probe.integer(0)) + " concurrently");
}

DirectorySessionStore::DirectorySessionStore(std::filesystem::path dir)
    : dir_(std::move(dir)), file_(dir_ / "session.json") {}

void DirectorySessionStore::write(const Session& session) {
  std::filesystem::create_directories(dir_);
  const auto tmp = dir_ / "session.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::InvalidArgument, "cannot write " + tmp.string());
    out << serialize_document(session.to_json());
  }
  std::filesystem::rename(tmp, file_);
}

void DirectorySessionStore::insert(const Session& session) {
  if (std::filesystem::exists(file_)) {
    throw Error(ErrorKind::InvalidArgument, "a session already exists in " + dir_.string());
  }
  write(session);
}

Session DirectorySessionStore::load_only() {
  if (!std::filesystem::exists(file_)) throw Error(ErrorKind::NotFound, "no session in " + dir_.string());
  return Session::from_json(parse_document(read_file(file_)));
}

std::optional<Session> DirectorySessionStore::load(const std::string& id) {
  if (!std::filesystem::exists(file_)) return std::nullopt;
  Session s = load_only();
  if (s.id() != id) return std::nullopt;
  return s;
}

void DirectorySessionStore::update(const Session& session, long long expected_version) {
  const Session stored = load_only();
  if (stored.id() != session.id()) throw Error(ErrorKind::NotFound, "unknown session " + session.id());
  if (stored.version() != expected_version) {
    throw Error(ErrorKind::VersionConflict, "session file moved to version " + std::to_string(stored.version()));
  }
  write(session);
}

}  // namespace twophase
