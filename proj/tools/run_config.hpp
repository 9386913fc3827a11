// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the command line tool: flat key=value config files and
// per-run manifests.
//
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dgtr::cli {

// Parses "key = value" lines; '#' starts a comment, blank lines are skipped.
// Keys may be written with or without the leading "--". Throws ContractError on
// a line without '=' or a repeated key.
std::map<std::string, std::string> parseConfigText(const std::string &text);
std::map<std::string, std::string> readConfigFile(const std::filesystem::path &path);

// Expands the config file named by "--config FILE" (or "--config=FILE") into
// flag arguments placed ahead of the command-line ones. Keys already given on
// the command line are skipped, so a flag always wins. Boolean values
// true/false/1/0/yes/no expand to the bare flag or to nothing; values holding
// spaces expand to several arguments. args excludes the program name.
std::vector<std::string> expandConfigArgs(const std::vector<std::string> &args);

// 64-bit FNV-1a, hex encoded.
std::string hashHex(const std::string &text);

struct Manifest {
    std::string command;
    std::map<std::string, std::string> config; // resolved option values
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;
    int exit_code = 0;
    std::string error;
    double seconds = 0;

    std::string configHash() const;
    std::string toJson() const;
};

void writeManifest(const std::filesystem::path &path, const Manifest &m);

} // namespace dgtr::cli
