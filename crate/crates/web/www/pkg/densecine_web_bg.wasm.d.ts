/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_phantomview_free: (a: number, b: number) => void;
export const phantomview_activation_map_rgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const phantomview_cine_frames: (a: number) => number;
export const phantomview_dense_dt_ms: (a: number) => number;
export const phantomview_dense_frames: (a: number) => number;
export const phantomview_frame_rgba: (a: number, b: number, c: number) => [number, number, number, number];
export const phantomview_grid: (a: number) => number;
export const phantomview_gt_tos: (a: number) => [number, number];
export const phantomview_lma_flags: (a: number, b: number, c: number, d: number) => [number, number];
export const phantomview_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
export const phantomview_rule_tos: (a: number, b: number) => [number, number];
export const phantomview_sectors: (a: number) => number;
export const phantomview_strain_rgba: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
