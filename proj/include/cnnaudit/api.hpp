#pragma once

#include "cnnaudit/audit_store.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

namespace cnnaudit {

struct ApiResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;

    nlohmann::json json() const { return nlohmann::json::parse(body); }
};

using QueryParams = std::map<std::string, std::string>;

/// Read-only view of one artifact. Every handler is a pure function of
/// (artifact, path, query), so concurrent calls need no locking.
class AuditApi {
public:
    AuditApi(AuditArtifact artifact, std::filesystem::path directory);

    /// Loads and validates the artifact at `path` (manifest or directory).
    static AuditApi open(const std::filesystem::path& path);

    ApiResponse get(std::string_view path, const QueryParams& query = {}) const;

    const AuditArtifact& artifact() const { return artifact_; }
    const std::filesystem::path& directory() const { return directory_; }
    /// Strong validator derived from the manifest text.
    const std::string& etag() const { return etag_; }

private:
    ApiResponse meta() const;
    ApiResponse subgroups(const QueryParams& query) const;
    ApiResponse subgroup(const std::string& id) const;
    ApiResponse pairing(const std::string& id) const;
    ApiResponse confusion(const std::string& id) const;
    ApiResponse image(const std::string& image_id) const;
    ApiResponse gradcam(const std::string& image_id, const QueryParams& query) const;
    ApiResponse neurons(const std::string& under_id, const QueryParams& query) const;
    ApiResponse concept_of(const std::string& layer, const std::string& channel) const;
    ApiResponse cluster(const std::string& layer, const std::string& channel) const;

    const Subgroup* subgroup_or_null(const std::string& id) const;
    nlohmann::json summary(const Subgroup& g) const;

    AuditArtifact artifact_;
    std::filesystem::path directory_;
    std::string etag_;
};

/// OpenAPI 3 description of the endpoint set.
nlohmann::json openapi_document();

/// HTTP front end: the API under /api, artifact assets under /assets, and an
/// optional UI build at /.
class ApiServer {
public:
    explicit ApiServer(const AuditApi& api, const std::optional<std::filesystem::path>& ui_dir = std::nullopt);
    ~ApiServer();
    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    /// Returns the bound port (an ephemeral one when `port` is 0).
    int bind(const std::string& host, int port);
    /// Blocks until stop() is called.
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Port from the AUDIT_PORT environment variable, else `fallback`.
int port_from_env(int fallback = 8080);

} // namespace cnnaudit
