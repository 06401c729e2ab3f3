#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moppr/world.hpp"

namespace moppr {

nlohmann::json page_view_to_json(const PageView& pv);
PageView page_view_from_json(const nlohmann::json& j);

/// One JSON object per line: user_id, query_id, ts, impressions, under.
void write_page_log(const std::filesystem::path& path, std::span<const PageView> pages);
std::vector<PageView> read_page_log(const std::filesystem::path& path, int page_size_N = 0);

/// Snapshot layout: <dir>/manifest.json, items.jsonl, users.jsonl, queries.jsonl.
void save_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);

/// Reads a whole text file; throws IoError when missing.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace moppr
