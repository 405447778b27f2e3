#pragma once

// Population manifests.
//
//   {"schema_version": 1, "task": "cb", "profiles": "profiles.json",
//    "members": [{"id", "persona_index", "backend": "scripted"|"llm", "weight",
//                 "description", "profile": "<profile id>"|"default"}]}
//
// "profiles" names a sibling file {"schema_version": 1, "profiles": [...]}
// holding scripted profiles; "default" derives the profile from the persona.

#include "dialplan/user_simulator.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace dialplan {

inline constexpr int kManifestSchemaVersion = 1;

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "file not found: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Validation, "malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

inline std::map<std::string, ScriptedProfile> read_profiles(const std::filesystem::path& path) {
  const auto doc = read_json_file(path);
  std::map<std::string, ScriptedProfile> out;
  try {
    for (const auto& j : doc.at("profiles")) {
      auto p = scripted_profile_from_json(j);
      out.emplace(p.id, std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Validation, "bad profile file " + path.string() + ": " + e.what());
  }
  return out;
}

inline void write_profiles(const std::filesystem::path& path, const std::vector<ScriptedProfile>& profiles) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : profiles) list.push_back(to_json(p));
  write_json_file(path, {{"schema_version", kManifestSchemaVersion}, {"profiles", list}});
}

inline bool is_default_profile(const SimulatorSpec& m, const Catalog& catalog) {
  auto a = to_json(m.profile());
  auto b = to_json(default_scripted_profile(m.task, m.persona.category, catalog, {}, fnv1a64(m.id)));
  a.erase("id");
  b.erase("id");
  return a == b;
}

/// Writes the manifest; scripted members whose profile differs from the
/// persona default go to `profiles_file` next to it.
inline void write_manifest(const std::filesystem::path& path, const Population& pop, TaskKind task, const Catalog& catalog,
                           const std::string& profiles_file = {}) {
  nlohmann::json members = nlohmann::json::array();
  std::vector<ScriptedProfile> custom;
  for (std::size_t i = 0; i < pop.members.size(); ++i) {
    const auto& m = pop.members[i];
    nlohmann::json j{{"id", m.id},
                     {"persona_index", m.persona.category.index()},
                     {"weight", pop.weights[i]},
                     {"description", m.persona.description}};
    if (m.scripted()) {
      j["backend"] = "scripted";
      if (is_default_profile(m, catalog)) {
        j["profile"] = "default";
      } else {
        j["profile"] = m.profile().id;
        custom.push_back(m.profile());
      }
    } else {
      j["backend"] = "llm";
    }
    members.push_back(std::move(j));
  }
  nlohmann::json doc{{"schema_version", kManifestSchemaVersion}, {"task", std::string(to_string(task))}, {"members", members}};
  if (!custom.empty()) {
    const std::string name = profiles_file.empty() ? path.stem().string() + ".profiles.json" : profiles_file;
    doc["profiles"] = name;
    write_profiles(path.parent_path() / name, custom);
  }
  write_json_file(path, doc);
}

struct ManifestOptions {
  // Backend for "llm" members. When null they fall back to default scripted
  // profiles if `scripted_fallback` is set, else loading fails.
  BackendPtr llm_backend;
  bool scripted_fallback = true;
  // Force every member onto llm_backend.
  bool all_llm = false;
};

inline Population load_manifest(const std::filesystem::path& path, const Catalog& catalog, TaskKind* task_out = nullptr,
                                const ManifestOptions& opt = {}) {
  const auto doc = read_json_file(path);
  try {
    if (doc.value("schema_version", 0) != kManifestSchemaVersion) {
      throw Error(ErrorCode::Validation, "unsupported manifest schema in " + path.string());
    }
    const auto task = parse_task(doc.at("task").get<std::string>());
    if (task_out) *task_out = task;
    std::map<std::string, ScriptedProfile> profiles;
    if (doc.contains("profiles")) profiles = read_profiles(path.parent_path() / doc.at("profiles").get<std::string>());

    Population pop;
    for (const auto& j : doc.at("members")) {
      SimulatorSpec spec;
      spec.id = j.at("id").get<std::string>();
      spec.task = task;
      spec.persona.category = PersonaCategory::from_index(j.at("persona_index").get<std::size_t>());
      spec.persona.description = j.value("description", "");
      if (spec.persona.description.empty()) {
        spec.persona = TemplatePersonaRenderer().render(spec.persona.category, pop.members.size());
      }
      spec.resisting_strategies = catalog.resisting_strategies(task);
      const auto kind = j.value("backend", "scripted");
      const bool llm = opt.all_llm || kind == "llm";
      if (llm && opt.llm_backend) {
        spec.backend = LlmBacked{opt.llm_backend};
      } else if (llm && !opt.scripted_fallback) {
        throw Error(ErrorCode::Validation, "member " + spec.id + " needs an LLM backend");
      } else {
        const auto name = j.value("profile", "default");
        ScriptedProfile profile;
        if (name == "default" || kind == "llm") {
          profile = default_scripted_profile(task, spec.persona.category, catalog, {}, fnv1a64(spec.id));
        } else {
          const auto it = profiles.find(name);
          if (it == profiles.end()) throw Error(ErrorCode::Validation, "member " + spec.id + ": unknown profile " + name);
          profile = it->second;
        }
        if (profile.task != task) throw Error(ErrorCode::Validation, "member " + spec.id + ": profile task mismatch");
        profile.validate(catalog);
        spec.backend = std::make_shared<const ScriptedProfile>(std::move(profile));
      }
      pop.members.push_back(std::move(spec));
      pop.weights.push_back(j.at("weight").get<double>());
    }
    pop.validate();
    return pop;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Validation, "bad manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace dialplan
