#pragma once

#include <cstddef>
#include <cstdint>

// Compile-time bounds of the rule hierarchy. Every scan over filters, routes
// and endpoints is a bounded loop against these constants.

#ifndef XLB_FILTER_MAX_NUM
#define XLB_FILTER_MAX_NUM 64
#endif
#ifndef XLB_ROUTE_MAX_NUM
#define XLB_ROUTE_MAX_NUM 1024
#endif
#ifndef XLB_MAX_ENDPOINTS
#define XLB_MAX_ENDPOINTS 256
#endif
#ifndef XLB_MAP_CAPACITY
#define XLB_MAP_CAPACITY 10000
#endif

namespace xlb {

inline constexpr std::size_t kFilterMaxNum = XLB_FILTER_MAX_NUM;
inline constexpr std::size_t kRouteMaxNum = XLB_ROUTE_MAX_NUM;
inline constexpr std::size_t kMaxEndpoints = XLB_MAX_ENDPOINTS;
inline constexpr std::size_t kMapCapacity = XLB_MAP_CAPACITY;

inline constexpr std::size_t kMaxHeaderBytes = 16 * 1024;
inline constexpr std::size_t kMaxMuxPayload = 16 * 1024 * 1024;
inline constexpr std::size_t kHoldQueueBound = 1024;

}  // namespace xlb
