#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace camoforge {

// Flat key=value configuration. Lines starting with '#' and blank lines are
// ignored; keys are unique; later flags may override file values.
using Config = std::map<std::string, std::string>;

Config parse_config_text(const std::string& text);
Config load_config(const std::string& path);
std::string serialize_config(const Config& cfg);  // sorted, one key=value per line

// Typed getters with defaults; malformed values raise UsageError.
double cfg_double(const Config& cfg, const std::string& key, double fallback);
int64_t cfg_int(const Config& cfg, const std::string& key, int64_t fallback);
std::string cfg_string(const Config& cfg, const std::string& key, const std::string& fallback);
bool cfg_bool(const Config& cfg, const std::string& key, bool fallback);

// CSV with fixed column order; numbers written with %.17g round-trip format.
std::string csv_row(const std::vector<std::string>& cells);
std::string format_double(double v);

std::string sha256_hex(const uint8_t* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// Resolves output root: explicit argument > CAMO_FORGE_HOME env > cwd.
std::string resolve_home(const std::string& explicit_dir);

}  // namespace camoforge
