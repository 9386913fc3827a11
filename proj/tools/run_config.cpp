// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//

#include "run_config.hpp"

#include <dgtr/data.hpp>
#include <dgtr/dist.hpp>
#include <dgtr/errors.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

namespace dgtr::cli {

namespace {

std::string
trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string
stripDashes(std::string key) {
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    return key;
}

// Name of a "--name" or "--name=value" argument, empty otherwise.
std::string
flagName(const std::string &arg) {
    if (arg.size() < 3 || arg.compare(0, 2, "--") != 0) return {};
    return arg.substr(2, arg.find('=') == std::string::npos ? std::string::npos : arg.find('=') - 2);
}

} // namespace

std::map<std::string, std::string>
parseConfigText(const std::string &text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    int lineNo = 0;
    while (std::getline(in, line)) {
        ++lineNo;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ContractError("config line " + std::to_string(lineNo) + ": expected key=value");
        }
        const std::string key = stripDashes(trim(line.substr(0, eq)));
        if (key.empty()) throw ContractError("config line " + std::to_string(lineNo) + ": empty key");
        if (!out.emplace(key, trim(line.substr(eq + 1))).second) {
            throw ContractError("config line " + std::to_string(lineNo) + ": repeated key '" + key + "'");
        }
    }
    return out;
}

std::map<std::string, std::string>
readConfigFile(const std::filesystem::path &path) {
    const Bytes raw = readFileBytes(path);
    return parseConfigText(std::string(raw.begin(), raw.end()));
}

std::vector<std::string>
expandConfigArgs(const std::vector<std::string> &args) {
    std::vector<std::string> rest;
    std::string configPath;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw ContractError("--config needs a file name");
            configPath = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            configPath = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (configPath.empty()) return rest;

    std::set<std::string> given;
    for (const auto &a : rest)
        if (auto n = flagName(a); !n.empty()) given.insert(n);

    std::vector<std::string> expanded;
    for (const auto &[key, value] : readConfigFile(configPath)) {
        if (given.count(key)) continue;
        std::string lower = value;
        std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
        if (lower == "true" || lower == "yes" || lower == "on") {
            expanded.push_back("--" + key);
        } else if (lower == "false" || lower == "no" || lower == "off") {
            continue;
        } else {
            expanded.push_back("--" + key);
            std::istringstream words(value);
            std::string w;
            while (words >> w) expanded.push_back(w);
        }
    }
    // Config flags go right after the subcommand name.
    auto sub = std::find_if(rest.begin(), rest.end(), [](const std::string &a) { return a.empty() || a[0] != '-'; });
    if (sub != rest.end()) ++sub;
    rest.insert(sub, expanded.begin(), expanded.end());
    return rest;
}

std::string
hashHex(const std::string &text) {
    const std::uint64_t h = contentHash(std::span(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string
Manifest::configHash() const {
    std::string canon = command + '\n';
    for (const auto &[k, v] : config) canon += k + '=' + v + '\n';
    return hashHex(canon);
}

std::string
Manifest::toJson() const {
    nlohmann::ordered_json j;
    j["tool"]        = "dgtr";
    j["command"]     = command;
    j["config_hash"] = configHash();
    j["seed"]        = seed;
    j["config"]      = config;
    j["versions"]    = {{"dgtr", DGTR_VERSION},
                        {"model_format", "DGS1"},
                        {"protocol", kProtocolVersion},
                        {"compiler", __VERSION__}};
    j["outputs"]     = outputs;
    j["exit_code"]   = exit_code;
    if (!error.empty()) j["error"] = error;
    j["seconds"] = seconds;
    return j.dump(2) + "\n";
}

void
writeManifest(const std::filesystem::path &path, const Manifest &m) {
    const std::string text = m.toJson();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    writeFileBytes(path, std::span(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
}

} // namespace dgtr::cli
