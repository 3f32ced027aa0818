#pragma once

#include <chrono>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "nprompt/errors.hpp"
#include "nprompt/scoring.hpp"

namespace nprompt {

// Clients for the image generation and scoring services.
//
//   image backend   POST {prompt, seed, steps} -> {image_id, url}
//   remote scorer   POST {prompt, image_id}    -> {score}
//
// Every call retries with exponential backoff; exhausting the budget raises
// TransportError. A shared limiter bounds concurrent in-flight requests.

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{100};
  double multiplier = 2.0;
  std::chrono::milliseconds timeout{30000};
};

class InFlightLimiter {
 public:
  explicit InFlightLimiter(int cap = 4) : sem_(cap < 1 ? 1 : cap) {}

  class Slot {
   public:
    explicit Slot(InFlightLimiter& l) : l_(l) { l_.sem_.acquire(); }
    ~Slot() { l_.sem_.release(); }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

   private:
    InFlightLimiter& l_;
  };

 private:
  std::counting_semaphore<1024> sem_;
};

namespace detail {

struct SplitUrl {
  std::string origin;
  std::string path;
};

inline SplitUrl split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto start = scheme == std::string::npos ? 0 : scheme + 3;
  const auto slash = url.find('/', start);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace detail

class JsonHttpClient {
 public:
  JsonHttpClient(std::string url, RetryPolicy retry, std::shared_ptr<InFlightLimiter> limiter)
      : url_(std::move(url)), retry_(retry), limiter_(std::move(limiter)) {
    if (!limiter_) limiter_ = std::make_shared<InFlightLimiter>();
  }

  const std::string& url() const noexcept { return url_; }

  nlohmann::json post(const nlohmann::json& body) const {
    const auto parts = detail::split_url(url_);
    auto backoff = retry_.initial_backoff;
    std::string last_error = "no attempt made";
    for (int attempt = 1; attempt <= retry_.attempts; ++attempt) {
      {
        InFlightLimiter::Slot slot(*limiter_);
        httplib::Client cli(parts.origin);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(retry_.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(retry_.timeout - secs);
        cli.set_connection_timeout(secs.count(), usecs.count());
        cli.set_read_timeout(secs.count(), usecs.count());
        auto res = cli.Post(parts.path, body.dump(), "application/json");
        if (!res) {
          last_error = "request failed: " + httplib::to_string(res.error());
        } else if (res->status < 200 || res->status >= 300) {
          last_error = "HTTP " + std::to_string(res->status);
        } else {
          try {
            return nlohmann::json::parse(res->body);
          } catch (const nlohmann::json::exception& e) {
            last_error = std::string("malformed response: ") + e.what();
          }
        }
      }
      if (attempt < retry_.attempts) {
        std::this_thread::sleep_for(backoff);
        backoff = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(backoff.count()) * retry_.multiplier));
      }
    }
    throw TransportError(url_ + ": " + last_error + " after " + std::to_string(retry_.attempts) + " attempts",
                         retry_.attempts);
  }

 private:
  std::string url_;
  RetryPolicy retry_;
  std::shared_ptr<InFlightLimiter> limiter_;
};

class HttpImageBackend final : public ImageBackend {
 public:
  HttpImageBackend(std::string url, int steps = 50, RetryPolicy retry = {},
                   std::shared_ptr<InFlightLimiter> limiter = nullptr)
      : client_(std::move(url), retry, std::move(limiter)), steps_(steps) {}

  ImageRef generate(std::string_view prompt, std::uint64_t seed) const override {
    auto res = client_.post({{"prompt", prompt}, {"seed", seed}, {"steps", steps_}});
    if (!res.contains("image_id") || !res["image_id"].is_string())
      throw TransportError(client_.url() + ": response lacks image_id", 1);
    ImageRef ref;
    ref.id = res["image_id"].get<std::string>();
    ref.url = res.value("url", std::string());
    ref.caption = std::string(prompt);
    ref.seed = seed;
    return ref;
  }

 private:
  JsonHttpClient client_;
  int steps_;
};

class HttpScorer final : public Scorer {
 public:
  HttpScorer(std::string url, RetryPolicy retry = {}, std::shared_ptr<InFlightLimiter> limiter = nullptr)
      : client_(std::move(url), retry, std::move(limiter)) {}

  double score(std::string_view prompt, const ImageRef& image) const override {
    auto res = client_.post({{"prompt", prompt}, {"image_id", image.id}});
    if (!res.contains("score") || !res["score"].is_number())
      throw TransportError(client_.url() + ": response lacks a numeric score", 1);
    return res["score"].get<double>();
  }

 private:
  JsonHttpClient client_;
};

}  // namespace nprompt
